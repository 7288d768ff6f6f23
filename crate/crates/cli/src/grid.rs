use std::io::Cursor;
use std::path::Path;

use ctxmod_quad::Image;
use image::{ImageFormat, Rgb, RgbImage};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("grid {rows}x{cols} needs {needed} images, got {got}")]
    TooFewImages { rows: usize, cols: usize, needed: usize, got: usize },
    #[error("grid dimensions must be positive")]
    Empty,
    #[error("images have mixed sides {0} and {1}")]
    MixedSides(usize, usize),
    #[error("bad grid spec {0:?}, expected ROWSxCOLS")]
    Spec(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Parses `ROWSxCOLS`.
pub fn parse_grid(spec: &str) -> Result<(usize, usize), GridError> {
    let bad = || GridError::Spec(spec.to_string());
    let (r, c) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows: usize = r.trim().parse().map_err(|_| bad())?;
    let cols: usize = c.trim().parse().map_err(|_| bad())?;
    if rows == 0 || cols == 0 {
        return Err(GridError::Empty);
    }
    Ok((rows, cols))
}

/// Smallest near-square grid holding `count` tiles.
pub fn square_grid(count: usize) -> (usize, usize) {
    let cols = (count as f64).sqrt().ceil().max(1.0) as usize;
    (count.div_ceil(cols).max(1), cols)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major tiling with 1-px black separators and border.
pub fn tile(images: &[Image], rows: usize, cols: usize) -> Result<RgbImage, GridError> {
    if rows == 0 || cols == 0 {
        return Err(GridError::Empty);
    }
    let needed = rows * cols;
    if images.len() < needed {
        return Err(GridError::TooFewImages { rows, cols, needed, got: images.len() });
    }
    let n = images[0].side();
    if let Some(other) = images[..needed].iter().find(|im| im.side() != n) {
        return Err(GridError::MixedSides(n, other.side()));
    }
    let stride = n + 1;
    let mut out = RgbImage::from_pixel((cols * stride + 1) as u32, (rows * stride + 1) as u32, Rgb([0, 0, 0]));
    for (k, im) in images[..needed].iter().enumerate() {
        let (r0, c0) = ((k / cols) * stride + 1, (k % cols) * stride + 1);
        for y in 0..n {
            for x in 0..n {
                let p = im.pixel(y, x);
                out.put_pixel((c0 + x) as u32, (r0 + y) as u32, Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]));
            }
        }
    }
    Ok(out)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, GridError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Tiles `images` and writes a PNG to `path`.
pub fn write_grid(images: &[Image], rows: usize, cols: usize, path: &Path) -> anyhow::Result<()> {
    let bytes = encode_png(&tile(images, rows, cols)?)?;
    std::fs::write(path, bytes).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))
}
