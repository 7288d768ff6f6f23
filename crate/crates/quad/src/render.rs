use std::f64::consts::{PI, TAU};

use crate::error::{QuadError, Result};
use crate::latents::{ObjectShape, QuadLatents};

/// Smallest and largest object radius as a fraction of the image side.
pub const R_MIN: f64 = 0.10;
pub const R_MAX: f64 = 0.22;
/// Pixels closer than this fraction of the side to the centre are ignored by
/// the quadrant readout.
pub const READOUT_EXCLUSION: f64 = 0.25;

/// An `n×n` RGB image stored row-major as interleaved `f32` (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    n: usize,
    data: Vec<f32>,
}

pub fn check_side(n: usize) -> Result<()> {
    if n < 16 || n % 2 != 0 {
        return Err(QuadError::BadSide(n));
    }
    Ok(())
}

impl Image {
    pub fn from_data(n: usize, data: Vec<f32>) -> Result<Self> {
        check_side(n)?;
        if data.len() != n * n * 3 {
            return Err(QuadError::BadImage {
                expected: n * n * 3,
                actual: data.len(),
            });
        }
        Ok(Self { n, data })
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = 3 * (row * self.n + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// HSV colour with hue `v·360°` and full saturation and value.
pub fn colour(v: f64) -> Result<[f64; 3]> {
    if !(0.0..=1.0).contains(&v) {
        return Err(QuadError::ValueOutOfRange(v));
    }
    let h = (v * 6.0) % 6.0;
    let sector = h.floor();
    let f = h - sector;
    let (q, t) = (1.0 - f, f);
    Ok(match sector as u8 {
        0 => [1.0, t, 0.0],
        1 => [q, 1.0, 0.0],
        2 => [0.0, 1.0, t],
        3 => [0.0, q, 1.0],
        4 => [t, 0.0, 1.0],
        _ => [1.0, 0.0, q],
    })
}

/// Hue of an RGB triple in turns, in `[0, 1)`. Grey maps to 0.
pub fn hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let sixths = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (sixths / 6.0).rem_euclid(1.0)
}

fn inside(shape: ObjectShape, u: f64, v: f64, r: f64) -> bool {
    match shape {
        ObjectShape::Circle => u * u + v * v <= r * r,
        ObjectShape::Square => {
            let s = r / std::f64::consts::SQRT_2;
            u.abs() <= s && v.abs() <= s
        }
        ObjectShape::Pill => {
            let half = r / 2.0;
            let cu = u.clamp(-half, half);
            (u - cu).powi(2) + v * v <= half * half
        }
        ObjectShape::Triangle => (0..3).all(|k| {
            // outward edge normals point away from the vertices at 90°, 210°, 330°
            let a = -PI / 2.0 + k as f64 * TAU / 3.0;
            u * a.cos() + v * a.sin() <= r / 2.0
        }),
    }
}

/// Renders latents on an `n×n` grid: four solid quadrants and a central
/// object. Quadrants are numbered row-major: 1 top-left, 2 top-right,
/// 3 bottom-left, 4 bottom-right.
pub fn render(l: &QuadLatents, n: usize) -> Result<Image> {
    check_side(n)?;
    if !l.is_valid() {
        let bad = l
            .quad
            .iter()
            .chain([&l.size, &l.orientation, &l.object])
            .find(|v| !(0.0..=1.0).contains(*v))
            .copied()
            .unwrap_or(f64::NAN);
        return Err(QuadError::ValueOutOfRange(bad));
    }
    let quads = [
        colour(l.quad[0])?,
        colour(l.quad[1])?,
        colour(l.quad[2])?,
        colour(l.quad[3])?,
    ];
    let obj = colour(l.object)?;
    let nf = n as f64;
    let r = (R_MIN + (R_MAX - R_MIN) * l.size) * nf;
    let (sin, cos) = (l.orientation * TAU).sin_cos();
    let centre = nf / 2.0;
    let half = n / 2;

    let mut data = Vec::with_capacity(n * n * 3);
    for row in 0..n {
        for col in 0..n {
            let dx = col as f64 + 0.5 - centre;
            let dy = row as f64 + 0.5 - centre;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let rgb = if inside(l.shape, u, v, r) {
                obj
            } else {
                quads[2 * usize::from(row >= half) + usize::from(col >= half)]
            };
            data.extend(rgb.iter().map(|&c| c as f32));
        }
    }
    Ok(Image { n, data })
}

/// Estimates the four quadrant colour values from pixels outside the
/// central exclusion disk, using the circular mean of per-pixel hues.
pub fn readout_quadrants(img: &Image) -> [f64; 4] {
    let n = img.n;
    let nf = n as f64;
    let centre = nf / 2.0;
    let limit = READOUT_EXCLUSION * nf;
    let half = n / 2;
    let mut acc = [[0.0f64; 2]; 4];
    for row in 0..n {
        for col in 0..n {
            let dx = col as f64 + 0.5 - centre;
            let dy = row as f64 + 0.5 - centre;
            if dx * dx + dy * dy <= limit * limit {
                continue;
            }
            let p = img.pixel(row, col);
            let h = hue([p[0] as f64, p[1] as f64, p[2] as f64]) * TAU;
            let q = 2 * usize::from(row >= half) + usize::from(col >= half);
            acc[q][0] += h.cos();
            acc[q][1] += h.sin();
        }
    }
    acc.map(|[c, s]| (s.atan2(c) / TAU).rem_euclid(1.0))
}

/// Distance between two colour values on the hue circle.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latents(q: [f64; 4]) -> QuadLatents {
        QuadLatents {
            quad: q,
            size: 0.5,
            orientation: 0.1,
            object: 0.9,
            shape: ObjectShape::Triangle,
        }
    }

    #[test]
    fn primary_hues() {
        assert_eq!(colour(0.0).unwrap(), [1.0, 0.0, 0.0]);
        let g = colour(1.0 / 3.0).unwrap();
        let b = colour(2.0 / 3.0).unwrap();
        for (x, y) in g.iter().zip([0.0, 1.0, 0.0]).chain(b.iter().zip([0.0, 0.0, 1.0])) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(colour(1.0).unwrap(), [1.0, 0.0, 0.0]);
        assert!(colour(1.01).is_err());
        assert!(colour(-0.1).is_err());
        assert!(colour(f64::NAN).is_err());
    }

    #[test]
    fn hue_inverts_colour() {
        for i in 0..1000 {
            let v = i as f64 / 1000.0;
            assert!(hue_distance(hue(colour(v).unwrap()), v) < 1e-12, "{v}");
        }
    }

    #[test]
    fn side_validation() {
        let l = latents([0.1; 4]);
        for n in [0, 8, 15, 17, 33] {
            assert!(render(&l, n).is_err());
        }
        assert!(render(&l, 16).is_ok());
    }

    #[test]
    fn quadrant_one_is_red_at_zero() {
        let img = render(&latents([0.0, 0.3, 0.3, 0.3]), 16).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(7, 0), [1.0, 0.0, 0.0]);
        assert_ne!(img.pixel(0, 15), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_background() {
        let mut l = latents([0.4; 4]);
        l.size = 0.0;
        let n = 32;
        let img = render(&l, n).unwrap();
        let want = colour(0.4).unwrap().map(|c| c as f32);
        let r = R_MIN * n as f64;
        for row in 0..n {
            for col in 0..n {
                let dx = col as f64 + 0.5 - 16.0;
                let dy = row as f64 + 0.5 - 16.0;
                if dx.hypot(dy) > r {
                    assert_eq!(img.pixel(row, col), want);
                }
            }
        }
    }

    #[test]
    fn object_stays_inside_exclusion_disk() {
        let n = 64;
        for shape in ObjectShape::ALL {
            for k in 0..8 {
                let mut l = latents([0.1; 4]);
                l.size = 1.0;
                l.shape = shape;
                l.orientation = k as f64 / 8.0;
                let img = render(&l, n).unwrap();
                let mut object_pixels = 0;
                for row in 0..n {
                    for col in 0..n {
                        if img.pixel(row, col) != img.pixel(0, 0) {
                            object_pixels += 1;
                            let dx = col as f64 + 0.5 - 32.0;
                            let dy = row as f64 + 0.5 - 32.0;
                            assert!(dx.hypot(dy) <= READOUT_EXCLUSION * n as f64);
                        }
                    }
                }
                assert!(object_pixels > 0, "{shape:?}");
            }
        }
    }

    #[test]
    fn shapes_differ() {
        let imgs: Vec<_> = ObjectShape::ALL
            .iter()
            .map(|&s| {
                let mut l = latents([0.1; 4]);
                l.shape = s;
                render(&l, 32).unwrap()
            })
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
    }

    #[test]
    fn solid_quarter_hue() {
        let c = colour(0.25).unwrap().map(|x| x as f32);
        let data: Vec<f32> = (0..16 * 16).flat_map(|_| c).collect();
        let img = Image::from_data(16, data).unwrap();
        for q in readout_quadrants(&img) {
            assert!((q - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn wraparound_is_circular() {
        let n = 16;
        let a = colour(0.995).unwrap().map(|x| x as f32);
        let b = colour(0.005).unwrap().map(|x| x as f32);
        let data: Vec<f32> = (0..n * n).flat_map(|i| if i % 2 == 0 { a } else { b }).collect();
        let img = Image::from_data(n, data).unwrap();
        for q in readout_quadrants(&img) {
            assert!(hue_distance(q, 0.0) < 0.005, "{q}");
        }
    }

    #[test]
    fn renders_are_bitwise_reproducible() {
        let l = latents([0.2, 0.7, 0.4, 0.9]);
        assert_eq!(render(&l, 16).unwrap(), render(&l, 16).unwrap());
    }
}
