//! Homographies, image warping, and CNN patch extraction.

use std::path::Path;

use crate::data::{GrayImage, Keypoint};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 3×3 projective transform, normalized so h33 = 1 when nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(mut m: [[f64; 3]; 3]) -> Result<Self> {
        let h33 = m[2][2];
        if h33 != 0.0 {
            for row in &mut m {
                for v in row.iter_mut() {
                    *v /= h33;
                }
            }
        }
        let h = Homography { m };
        let det = h.det();
        let scale: f64 = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        if !det.is_finite() || det.abs() < 1e-12 * scale.powi(3).max(1e-30) {
            return Err(Error::invalid(
                "Homography::new",
                format!("matrix is not invertible (det = {det})"),
            ));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation by `angle` and uniform `scale` about `center`, then a
    /// translation. Maps direction (1, 0) to (cos a, sin a).
    pub fn similarity(center: (f64, f64), angle: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let (a, b) = (scale * c, scale * s);
        let (cx, cy) = center;
        // x' = a(x−cx) − b(y−cy) + cx + tx
        Homography {
            m: [
                [a, -b, cx + tx - a * cx + b * cy],
                [b, a, cy + ty - b * cx - a * cy],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.m;
        let det = self.det();
        if det.abs() < 1e-300 {
            return Err(Error::invalid("Homography::inverse", "singular matrix"));
        }
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        Homography::new(inv)
    }

    /// Local isotropic scale factor sqrt(|det J|) of the map at (x, y).
    pub fn local_scale(&self, x: f64, y: f64) -> f64 {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-12 {
            return f64::INFINITY;
        }
        let u = m[0][0] * x + m[0][1] * y + m[0][2];
        let v = m[1][0] * x + m[1][1] * y + m[1][2];
        let du_dx = (m[0][0] * w - u * m[2][0]) / (w * w);
        let du_dy = (m[0][1] * w - u * m[2][1]) / (w * w);
        let dv_dx = (m[1][0] * w - v * m[2][0]) / (w * w);
        let dv_dy = (m[1][1] * w - v * m[2][1]) / (w * w);
        (du_dx * dv_dy - du_dy * dv_dx).abs().sqrt()
    }

    /// Text format: 9 whitespace-separated reals, row-major.
    pub fn read_text(path: &Path) -> Result<Homography> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Ingestion {
                path: path.display().to_string(),
                detail: format!("bad number: {e}"),
            })?;
        if vals.len() != 9 {
            return Err(Error::Ingestion {
                path: path.display().to_string(),
                detail: format!("expected 9 values, got {}", vals.len()),
            });
        }
        Homography::new([
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            [vals[6], vals[7], vals[8]],
        ])
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let m = &self.m;
        let text = format!(
            "{} {} {}\n{} {} {}\n{} {} {}\n",
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]
        );
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Projective transform with perspective divide; `None` when the point maps
/// to infinity.
pub fn map_point(h: &Homography, x: f64, y: f64) -> Option<(f64, f64)> {
    let m = h.matrix();
    let w = m[2][0] * x + m[2][1] * y + m[2][2];
    if w.abs() < 1e-12 {
        return None;
    }
    Some((
        (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
        (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
    ))
}

/// Renders `src` under the forward map `h` (src → dst): each output pixel
/// samples the source at h⁻¹(p), bilinear, clamped at the borders.
pub fn warp_image(src: &GrayImage, h: &Homography) -> Result<GrayImage> {
    let inv = h.inverse()?;
    let mut data = Vec::with_capacity(src.width() * src.height());
    for y in 0..src.height() {
        for x in 0..src.width() {
            let v = match map_point(&inv, x as f64, y as f64) {
                Some((sx, sy)) => src.sample_bilinear(sx, sy),
                None => 0.0,
            };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    GrayImage::new(src.width(), src.height(), data)
}

pub const PATCH_SIDE: usize = 28;

/// Circumradius (in pixels) of the patch sampling grid for scale `sigma`.
pub fn patch_radius(sigma: f64, lambda: f64) -> f64 {
    // offsets run from −14 to +13 sample spacings of λσ/14
    let spacing = 2.0 * lambda * sigma / PATCH_SIDE as f64;
    14.0 * spacing * std::f64::consts::SQRT_2
}

/// Samples a 28×28 grid of side 2·λ·σ rotated by `theta` about the keypoint,
/// then standardizes to zero mean, unit variance (constant patches map to
/// all zeros). Sample offsets are (k − 14)·spacing so that a unit-spaced,
/// axis-aligned grid at an integer center reads pixels exactly.
pub fn extract_patch(
    img: &GrayImage,
    kp: &Keypoint,
    theta: f64,
    lambda: f64,
) -> Result<Tensor> {
    if !img.supports_region(kp.x, kp.y, patch_radius(kp.sigma, lambda)) {
        return Err(Error::invalid(
            "extract_patch",
            format!(
                "support region of keypoint at ({}, {}) with sigma {} leaves the image",
                kp.x, kp.y, kp.sigma
            ),
        ));
    }
    let spacing = 2.0 * lambda * kp.sigma / PATCH_SIDE as f64;
    let (sin_t, cos_t) = theta.sin_cos();
    let mut vals = Vec::with_capacity(PATCH_SIDE * PATCH_SIDE);
    for r in 0..PATCH_SIDE {
        let v = (r as f64 - 14.0) * spacing;
        for c in 0..PATCH_SIDE {
            let u = (c as f64 - 14.0) * spacing;
            let px = kp.x + cos_t * u - sin_t * v;
            let py = kp.y + sin_t * u + cos_t * v;
            vals.push(img.sample_bilinear(px, py));
        }
    }

    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        vals.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let inv_std = 1.0 / var.sqrt();
        vals.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
    }
    Tensor::from_vec(&[1, 1, PATCH_SIDE, PATCH_SIDE], vals)
}
