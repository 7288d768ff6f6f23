use ctxmod_cli::grid::{encode_png, parse_grid, square_grid, tile, GridError};
use ctxmod_quad::{render, sample_latents, ContextId, Image};
use rand::SeedableRng;

fn sample_image(seed: u64, n: usize) -> Image {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    render(&sample_latents(&ContextId::obs(), &mut rng), n).unwrap()
}

#[test]
fn identical_images_give_identical_tiles() {
    let n = 16;
    let img = sample_image(1, n);
    let images = vec![img; 64];
    let out = tile(&images, 8, 8).unwrap();
    assert_eq!(out.dimensions(), (8 * 17 + 1, 8 * 17 + 1));
    let tile_bytes = |r: u32, c: u32| -> Vec<u8> {
        let mut v = Vec::new();
        for y in 0..n as u32 {
            for x in 0..n as u32 {
                v.extend_from_slice(&out.get_pixel(c * 17 + 1 + x, r * 17 + 1 + y).0);
            }
        }
        v
    };
    let first = tile_bytes(0, 0);
    for r in 0..8 {
        for c in 0..8 {
            assert_eq!(tile_bytes(r, c), first);
        }
    }
}

#[test]
fn single_tile_is_image_plus_border() {
    let n = 16;
    let img = sample_image(2, n);
    let out = tile(std::slice::from_ref(&img), 1, 1).unwrap();
    assert_eq!(out.dimensions(), (n as u32 + 2, n as u32 + 2));
    for y in 0..n + 2 {
        for x in 0..n + 2 {
            let px = out.get_pixel(x as u32, y as u32).0;
            if x == 0 || y == 0 || x == n + 1 || y == n + 1 {
                assert_eq!(px, [0, 0, 0]);
            } else {
                let v = img.pixel(y - 1, x - 1);
                let expect = v.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
                assert_eq!(px, expect);
            }
        }
    }
}

#[test]
fn png_bytes_are_deterministic_and_lossless() {
    let images: Vec<Image> = (0..6).map(|s| sample_image(s, 16)).collect();
    let a = encode_png(&tile(&images, 2, 3).unwrap()).unwrap();
    let b = encode_png(&tile(&images, 2, 3).unwrap()).unwrap();
    assert_eq!(a, b);
    let decoded = image::load_from_memory(&a).unwrap().to_rgb8();
    assert_eq!(decoded, tile(&images, 2, 3).unwrap());
}

#[test]
fn grid_errors() {
    let images = vec![sample_image(0, 16); 3];
    assert!(matches!(tile(&images, 2, 2), Err(GridError::TooFewImages { needed: 4, got: 3, .. })));
    assert!(matches!(tile(&images, 0, 2), Err(GridError::Empty)));
    let mixed = vec![sample_image(0, 16), sample_image(0, 32)];
    assert!(matches!(tile(&mixed, 1, 2), Err(GridError::MixedSides(16, 32))));
}

#[test]
fn grid_specs() {
    assert_eq!(parse_grid("8x8").unwrap(), (8, 8));
    assert_eq!(parse_grid("2X5").unwrap(), (2, 5));
    assert!(parse_grid("8").is_err());
    assert!(parse_grid("0x3").is_err());
    assert!(parse_grid("ax3").is_err());
    assert_eq!(square_grid(64), (8, 8));
    assert_eq!(square_grid(10), (3, 4));
    assert_eq!(square_grid(1), (1, 1));
}
