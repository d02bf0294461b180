//! Synthetic training data: textured test images and rotation pairs with
//! known ground-truth warps.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{
    detect_keypoints, extract_patch, map_point, warp_image, GrayImage, Homography, Keypoint,
};
use crate::descriptor::{build_table, support_radius, PatchContext, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::trainer::TrainingPair;
use crate::util::{deg_to_rad, derive_rng, derive_rng_indexed, pool, Stream};

/// Smooth random texture: a field of Gaussian blobs over a gentle ramp.
/// Deterministic per (size, seed); rich in DoG keypoints.
pub fn synthetic_texture(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = derive_rng(seed, Stream::Synth);
    let n_blobs = (width * height / 700).clamp(24, 220);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(1.8..9.0),
                rng.random_range(-0.28..0.28),
            )
        })
        .collect();
    let (wf, hf) = (width as f64, height as f64);
    GrayImage::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 0.45 + 0.1 * (xf / wf) + 0.05 * (yf / hf);
        for &(cx, cy, s, a) in &blobs {
            let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
            if d2 < 25.0 * s * s {
                v += a * (-d2 / (2.0 * s * s)).exp();
            }
        }
        v.clamp(0.02, 0.98)
    })
    .expect("texture in range")
}

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    /// Support scale for both descriptor tables and CNN patches.
    pub lambda: f64,
    /// Warp rotations are uniform in ±this (degrees).
    pub max_rotation_deg: f64,
    /// Warp scale is uniform in 1 ± this.
    pub scale_jitter: f64,
    /// Intensity gain 1 ± this, offset ± this/2.
    pub intensity_jitter: f64,
    /// Detection cap per base image.
    pub max_keypoints: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            lambda: DEFAULT_LAMBDA,
            max_rotation_deg: 45.0,
            scale_jitter: 0.05,
            intensity_jitter: 0.1,
            max_keypoints: 1000,
        }
    }
}

/// Renders rotated/scaled/intensity-perturbed copies of the base images and
/// pairs each keypoint with its warped self, with descriptor tables built
/// for both branches.
///
/// `gt_rotation` of a pair is the value an ideal predictor gives for
/// f(p¹) − f(p²): branch 2 is the copy rotated by φ, so the ground truth is
/// −φ. Keypoints are pre-filtered so any rotation in range keeps both
/// supports inside their images; the drawn angles therefore survive
/// unfiltered and stay uniform.
pub fn synth_pairs(
    base_images: &[Arc<GrayImage>],
    n_pairs: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Vec<TrainingPair>> {
    if base_images.is_empty() {
        return Err(Error::Ingestion {
            path: "<synth>".into(),
            detail: "need at least one base image".into(),
        });
    }
    if n_pairs == 0 {
        return Ok(Vec::new());
    }

    let s_max = 1.0 + params.scale_jitter;
    let mut valid: Vec<(usize, Keypoint)> = Vec::new();
    for (img_idx, img) in base_images.iter().enumerate() {
        let (w, h) = (img.width() as f64, img.height() as f64);
        let center = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let inscribed = (w.min(h) - 1.0) / 2.0;
        for kp in detect_keypoints(img, params.max_keypoints) {
            let r_a = support_radius(kp.sigma, params.lambda);
            if !img.supports_region(kp.x, kp.y, r_a) {
                continue;
            }
            // warped center stays on a circle of radius d·s around the image
            // center for every rotation; keep the whole support inside the
            // inscribed circle for the worst-case scale
            let d = ((kp.x - center.0).powi(2) + (kp.y - center.1).powi(2)).sqrt();
            let r_b = support_radius(kp.sigma * s_max, params.lambda);
            if d * s_max + r_b + 2.0 > inscribed {
                continue;
            }
            valid.push((img_idx, kp));
        }
    }
    if valid.is_empty() {
        return Err(Error::Ingestion {
            path: "<synth>".into(),
            detail: "insufficient valid keypoints in the base images".into(),
        });
    }

    let max_rot = deg_to_rad(params.max_rotation_deg);
    let results: Vec<Result<TrainingPair>> = pool().install(|| {
        (0..n_pairs)
            .into_par_iter()
            .map(|i| {
                let (img_idx, kp) = valid[i % valid.len()];
                let img = &base_images[img_idx];
                let mut rng = derive_rng_indexed(seed, Stream::Synth, i as u64, 0);

                let phi = if max_rot > 0.0 {
                    rng.random_range(-max_rot..max_rot)
                } else {
                    0.0
                };
                let scale = if params.scale_jitter > 0.0 {
                    1.0 + rng.random_range(-params.scale_jitter..params.scale_jitter)
                } else {
                    1.0
                };
                let (gain, offset) = if params.intensity_jitter > 0.0 {
                    (
                        1.0 + rng.random_range(-params.intensity_jitter..params.intensity_jitter),
                        rng.random_range(-params.intensity_jitter / 2.0..params.intensity_jitter / 2.0),
                    )
                } else {
                    (1.0, 0.0)
                };

                let center = (
                    (img.width() as f64 - 1.0) / 2.0,
                    (img.height() as f64 - 1.0) / 2.0,
                );
                let warp = Homography::similarity(center, phi, scale, 0.0, 0.0);
                let warped = warp_image(img, &warp)?;
                let warped = if gain != 1.0 || offset != 0.0 {
                    GrayImage::new(
                        warped.width(),
                        warped.height(),
                        warped
                            .data()
                            .iter()
                            .map(|v| (gain * v + offset).clamp(0.0, 1.0))
                            .collect(),
                    )?
                } else {
                    warped
                };
                let warped = Arc::new(warped);

                let (bx, by) = map_point(&warp, kp.x, kp.y).ok_or_else(|| {
                    Error::invalid("synth_pairs", "keypoint maps to infinity")
                })?;
                let kp_b = Keypoint {
                    x: bx,
                    y: by,
                    sigma: kp.sigma * scale,
                    response: kp.response,
                    orientation: kp.orientation,
                };

                let ctx_a =
                    PatchContext::new(img.clone(), kp.x, kp.y, kp.sigma, params.lambda)?;
                let ctx_b =
                    PatchContext::new(warped.clone(), kp_b.x, kp_b.y, kp_b.sigma, params.lambda)?;

                Ok(TrainingPair {
                    patch1: extract_patch(img, &kp, 0.0, params.lambda)?,
                    patch2: extract_patch(&warped, &kp_b, 0.0, params.lambda)?,
                    table1: build_table(&ctx_a, 2 * i as u64)?,
                    table2: build_table(&ctx_b, 2 * i as u64 + 1)?,
                    gt_rotation: Some(-phi),
                })
            })
            .collect()
    });

    results.into_iter().collect()
}
