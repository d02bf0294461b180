//! Image I/O, keypoint detection, homography-based correspondence, patch
//! extraction, synthetic pair generation, and dataset serialization.
//!
//! Coordinate convention: pixel centers sit at integer coordinates, x grows
//! with columns and y with rows. Angles rotate (1,0) towards (0,1) and are
//! used identically by the warper, the patch samplers, and the detector's
//! dominant orientation, so orientation deltas line up across the pipeline.

mod correspond;
mod dataset;
mod detect;
mod geometry;
mod image_io;
mod synth;

pub use correspond::{build_correspondences, CorrespondenceSet};
pub use dataset::{load_dataset, save_dataset};
pub use detect::{detect_keypoints, detect_keypoints_with, DetectorParams};
pub use geometry::{extract_patch, map_point, patch_radius, warp_image, Homography, PATCH_SIDE};
pub use image_io::{load_image, save_pgm};
pub use synth::{synth_pairs, synthetic_texture, SynthParams};

use crate::error::{Error, Result};

/// Grayscale image with intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::invalid(
                "GrayImage::new",
                format!("{}x{} image with {} samples", width, height, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(
                "GrayImage::new",
                format!("intensity {v} outside [0, 1]"),
            ));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at a continuous position, clamped to the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.get(x0, y0);
        let v10 = self.get(x1, y0);
        let v01 = self.get(x0, y1);
        let v11 = self.get(x1, y1);
        v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy
    }

    /// Whether every sample of a square of circumradius `radius` around
    /// (x, y) stays inside the image (with a one-pixel bilinear margin).
    pub fn supports_region(&self, x: f64, y: f64, radius: f64) -> bool {
        let margin = radius + 1.0;
        x - margin >= 0.0
            && y - margin >= 0.0
            && x + margin <= (self.width - 1) as f64
            && y + margin <= (self.height - 1) as f64
    }
}

/// Detected feature point. `orientation` is the detector's dominant
/// orientation (radians), used only by baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub response: f64,
    pub orientation: f64,
}

/// Keypoint text format: one per line `x y sigma response orientation`.
/// Orientation is stored in degrees at this boundary.
pub fn write_keypoints(path: &std::path::Path, kps: &[Keypoint]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for kp in kps {
        writeln!(
            w,
            "{} {} {} {} {}",
            kp.x,
            kp.y,
            kp.sigma,
            kp.response,
            crate::util::rad_to_deg(kp.orientation)
        )?;
    }
    Ok(())
}

pub fn read_keypoints(path: &std::path::Path) -> Result<Vec<Keypoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut kps = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::IngestionRecord {
                path: path.display().to_string(),
                record: lineno,
                detail: format!("bad number: {e}"),
            })?;
        if fields.len() != 5 {
            return Err(Error::IngestionRecord {
                path: path.display().to_string(),
                record: lineno,
                detail: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        kps.push(Keypoint {
            x: fields[0],
            y: fields[1],
            sigma: fields[2],
            response: fields[3],
            orientation: crate::util::deg_to_rad(fields[4]),
        });
    }
    Ok(kps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_interpolates_and_hits_pixels() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(img.sample_bilinear(0.0, 0.0), 0.0);
        assert_eq!(img.sample_bilinear(1.0, 0.0), 1.0);
        assert!((img.sample_bilinear(0.5, 0.0) - 0.5).abs() < 1e-15);
        assert!((img.sample_bilinear(0.5, 0.5) - 0.5).abs() < 1e-15);
        // clamped outside
        assert_eq!(img.sample_bilinear(-3.0, 0.0), 0.0);
    }

    #[test]
    fn gray_image_rejects_out_of_range() {
        assert!(GrayImage::new(2, 1, vec![0.0, 1.5]).is_err());
        assert!(GrayImage::new(2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(GrayImage::new(2, 1, vec![0.0]).is_err());
    }

    #[test]
    fn keypoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kps.txt");
        let kps = vec![
            Keypoint { x: 1.5, y: 2.25, sigma: 2.0, response: 0.5, orientation: 0.3 },
            Keypoint { x: 10.0, y: 20.0, sigma: 4.0, response: -0.25, orientation: -1.2 },
        ];
        write_keypoints(&path, &kps).unwrap();
        let back = read_keypoints(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in kps.iter().zip(back.iter()) {
            assert!((a.x - b.x).abs() < 1e-12);
            assert!((a.orientation - b.orientation).abs() < 1e-12);
        }
    }
}
