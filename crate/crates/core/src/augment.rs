//! Random rotation and shear, applied identically to images and landmarks.
//!
//! The forward map is `p' = Shear * Rot * (p - c) + c` about the image
//! centre `c`: rotate first, then shear. Positive angles turn the image
//! counter-clockwise as displayed (y grows downwards), so a 90 degree turn
//! on an `S x S` grid sends `(x, y)` to `(y, S - 1 - x)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{LandmarkSet, Point};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Horizontal shear, `x' = x + shear_x * y`.
    pub shear_x: f64,
    /// Vertical shear, `y' = y + shear_y * x`.
    pub shear_y: f64,
    pub center: (f64, f64),
}

impl AffineParams {
    pub fn identity(center: (f64, f64)) -> Self {
        Self {
            rotation_deg: 0.0,
            shear_x: 0.0,
            shear_y: 0.0,
            center,
        }
    }

    /// Centre of a `width x height` image in pixel-centre coordinates.
    pub fn image_center(width: usize, height: usize) -> (f64, f64) {
        ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    }

    pub fn to_map(&self) -> AffineMap {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let rot = [[c, s], [-s, c]];
        let shear = [[1.0, self.shear_x], [self.shear_y, 1.0]];
        let mut lin = [[0.0; 2]; 2];
        for (i, row) in lin.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = shear[i][0] * rot[0][j] + shear[i][1] * rot[1][j];
            }
        }
        let (cx, cy) = self.center;
        let tx = cx - (lin[0][0] * cx + lin[0][1] * cy);
        let ty = cy - (lin[1][0] * cx + lin[1][1] * cy);
        AffineMap {
            m: [[lin[0][0], lin[0][1], tx], [lin[1][0], lin[1][1], ty]],
        }
    }
}

/// A 2x3 affine matrix acting on `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap {
    pub m: [[f64; 3]; 2],
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn inverse(&self) -> Result<AffineMap> {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return Err(Error::Config(format!("affine map is singular (det {det})")));
        }
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineMap {
            m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]],
        })
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &AffineMap) -> AffineMap {
        let (a, b) = (&self.m, &first.m);
        let mut m = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            m[i][2] += a[i][2];
        }
        AffineMap { m }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_range_deg: (f64, f64),
    pub shear_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_range_deg: (-15.0, 15.0),
            shear_range: (-0.15, 0.15),
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn disabled() -> Self {
        Self {
            rotation_range_deg: (0.0, 0.0),
            shear_range: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("rotation", self.rotation_range_deg), ("shear", self.shear_range)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Uniform draws from each range, centred on a `width x height` image.
pub fn sample_params(config: &AugmentConfig, rng: &mut impl Rng, width: usize, height: usize) -> AffineParams {
    AffineParams {
        rotation_deg: draw(rng, config.rotation_range_deg),
        shear_x: draw(rng, config.shear_range),
        shear_y: draw(rng, config.shear_range),
        center: AffineParams::image_center(width, height),
    }
}

/// Tolerance for treating a source coordinate as on the image border.
const EDGE_EPS: f64 = 1e-6;

/// Bilinear sample of a row-major `width x height` plane; `None` when the
/// point falls outside the pixel-centre rectangle.
pub(crate) fn bilinear(plane: &[f32], width: usize, height: usize, x: f64, y: f64) -> Option<f32> {
    let (maxx, maxy) = (width as f64 - 1.0, height as f64 - 1.0);
    if x < -EDGE_EPS || y < -EDGE_EPS || x > maxx + EDGE_EPS || y > maxy + EDGE_EPS {
        return None;
    }
    let (x, y) = (x.clamp(0.0, maxx), y.clamp(0.0, maxy));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx: usize, yy: usize| plane[yy * width + xx] as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    Some((top * (1.0 - fy) + bottom * fy) as f32)
}

pub fn warp_image(image: &Tensor<f32>, params: &AffineParams) -> Result<Tensor<f32>> {
    warp_image_with(image, &params.to_map())
}

/// Inverse-mapping warp of a `C x H x W` image; samples outside the source
/// are filled with 0.
pub fn warp_image_with(image: &Tensor<f32>, map: &AffineMap) -> Result<Tensor<f32>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::Dimension {
            op: "warp_image",
            reason: format!("expected C x H x W, got {:?}", image.shape()),
        });
    };
    if h < 2 || w < 2 {
        return Err(Error::Dimension {
            op: "warp_image",
            reason: format!("image must be at least 2x2, got {w}x{h}"),
        });
    }
    let inv = map.inverse()?;
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            for ch in 0..c {
                let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
                if let Some(v) = bilinear(plane, w, h, sx, sy) {
                    out[ch * h * w + y * w + x] = v;
                }
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub fn warp_landmarks(landmarks: &LandmarkSet, params: &AffineParams) -> Result<(LandmarkSet, Vec<bool>)> {
    warp_landmarks_with(landmarks, &params.to_map())
}

/// Forward-map each landmark and round to the nearest pixel. Points that
/// leave the grid are clamped to the border and reported as not visible.
pub fn warp_landmarks_with(landmarks: &LandmarkSet, map: &AffineMap) -> Result<(LandmarkSet, Vec<bool>)> {
    let g = landmarks.grid_size() as i64;
    let (points, visible) = landmarks
        .points()
        .iter()
        .map(|p| {
            let (x, y) = map.apply(p.x as f64, p.y as f64);
            let (rx, ry) = (x.round() as i64, y.round() as i64);
            let inside = (0..g).contains(&rx) && (0..g).contains(&ry);
            (Point::new(rx.clamp(0, g - 1), ry.clamp(0, g - 1)), inside)
        })
        .unzip();
    Ok((LandmarkSet::new(points, landmarks.grid_size())?, visible))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn map_times_inverse_is_identity() {
        let p = AffineParams {
            rotation_deg: 23.0,
            shear_x: 0.1,
            shear_y: -0.07,
            center: (31.5, 31.5),
        };
        let m = p.to_map();
        let id = m.compose(&m.inverse().unwrap());
        for i in 0..2 {
            for j in 0..3 {
                assert!((id.m[i][j] - AffineMap::IDENTITY.m[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_ranges_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_params(&AugmentConfig::disabled(), &mut rng, 64, 64);
        assert_eq!(p, AffineParams::identity((31.5, 31.5)));
        assert_eq!(p.to_map(), AffineMap::IDENTITY);
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let cfg = AugmentConfig::default();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_params(&cfg, &mut a, 64, 64), sample_params(&cfg, &mut b, 64, 64));
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for _ in 0..10_000 {
            let p = sample_params(&cfg, &mut a, 64, 64);
            lo = lo.min(p.rotation_deg);
            hi = hi.max(p.rotation_deg);
            assert!(p.shear_x.abs() <= 0.15 && p.shear_y.abs() <= 0.15);
        }
        assert!(lo >= -15.0 && hi <= 15.0);
    }

    #[test]
    fn bad_ranges_rejected() {
        let cfg = AugmentConfig {
            rotation_range_deg: (5.0, -5.0),
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    #[test]
    fn constant_image_stays_constant_inside() {
        let img = Tensor::full(&[1, 16, 16], 0.4);
        let p = AffineParams {
            rotation_deg: 10.0,
            shear_x: 0.1,
            shear_y: 0.0,
            center: (7.5, 7.5),
        };
        let out = warp_image(&img, &p).unwrap();
        let inv = p.to_map().inverse().unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                let v = out.data()[y * 16 + x];
                if (0.0..=15.0).contains(&sx) && (0.0..=15.0).contains(&sy) {
                    assert!((v - 0.4).abs() < 1e-6);
                } else {
                    assert!(v == 0.0 || (v - 0.4).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sheared_corner_leaves_grid() {
        let l = LandmarkSet::new(vec![Point::new(63, 63), Point::new(32, 32)], 64).unwrap();
        let p = AffineParams {
            rotation_deg: 0.0,
            shear_x: 0.8,
            shear_y: 0.0,
            center: (31.5, 31.5),
        };
        let (w, vis) = warp_landmarks(&l, &p).unwrap();
        assert_eq!(vis, vec![false, true]);
        assert_eq!(w.points()[0].x, 63);
    }

    #[test]
    fn rejects_tiny_or_malformed_images() {
        let p = AffineParams::identity((0.0, 0.0));
        assert!(warp_image(&Tensor::zeros(&[1, 1, 4]), &p).is_err());
        assert!(warp_image(&Tensor::zeros(&[4, 4]), &p).is_err());
    }
}
