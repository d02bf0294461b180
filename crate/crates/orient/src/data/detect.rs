//! Multi-octave difference-of-Gaussians keypoint detector with sub-pixel
//! refinement, edge suppression, and a 36-bin dominant-orientation estimate.

use std::f64::consts::TAU;

use crate::data::{GrayImage, Keypoint};
use crate::util::wrap_to_pi;

#[derive(Debug, Clone, Copy)]
pub struct DetectorParams {
    /// Scale samples per octave.
    pub intervals: usize,
    /// Blur of the first pyramid level.
    pub sigma0: f64,
    /// Assumed blur of the input image.
    pub assumed_blur: f64,
    /// DoG contrast threshold (divided by `intervals` per level).
    pub contrast_threshold: f64,
    /// Edge rejection: trace²/det must stay below (r+1)²/r.
    pub edge_ratio: f64,
    /// Pixels ignored at each octave border.
    pub border: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            intervals: 3,
            sigma0: 1.6,
            assumed_blur: 0.5,
            contrast_threshold: 0.04,
            edge_ratio: 10.0,
            border: 5,
        }
    }
}

/// DoG extrema sorted by |response| descending, truncated to `max_count`.
/// Each keypoint carries the dominant orientation of its neighbourhood.
pub fn detect_keypoints(img: &GrayImage, max_count: usize) -> Vec<Keypoint> {
    detect_keypoints_with(img, max_count, &DetectorParams::default())
}

pub fn detect_keypoints_with(
    img: &GrayImage,
    max_count: usize,
    params: &DetectorParams,
) -> Vec<Keypoint> {
    if img.width() < 28 || img.height() < 28 || max_count == 0 {
        return Vec::new();
    }
    let s = params.intervals;
    let k = 2f64.powf(1.0 / s as f64);

    // number of octaves keeps the smallest pyramid at least 16 px
    let min_side = img.width().min(img.height());
    let n_octaves = ((min_side as f64 / 16.0).log2().floor() as i64 + 1).max(1) as usize;

    // seed level at sigma0
    let extra = (params.sigma0 * params.sigma0 - params.assumed_blur * params.assumed_blur)
        .max(0.0)
        .sqrt();
    let mut base = if extra > 1e-6 {
        gaussian_blur(img, extra)
    } else {
        img.clone()
    };

    let mut keypoints = Vec::new();
    for octave in 0..n_octaves {
        // Gaussian stack: levels 0..s+3 at sigma0·k^i
        let mut gauss = Vec::with_capacity(s + 3);
        gauss.push(base.clone());
        for i in 1..s + 3 {
            let prev_sigma = params.sigma0 * k.powi(i as i32 - 1);
            let inc = prev_sigma * (k * k - 1.0).sqrt();
            gauss.push(gaussian_blur(&gauss[i - 1], inc));
        }
        let dog: Vec<Plane> = (0..s + 2)
            .map(|i| Plane::diff(&gauss[i + 1], &gauss[i]))
            .collect();

        scan_octave(
            &dog,
            &gauss,
            octave,
            params,
            k,
            &mut keypoints,
            img,
        );

        // next octave starts from the level at 2·sigma0
        if octave + 1 < n_octaves {
            base = downsample(&gauss[s]);
            if base.width() < 16 || base.height() < 16 {
                break;
            }
        }
    }

    keypoints.sort_by(|a, b| {
        b.response
            .abs()
            .partial_cmp(&a.response.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.y.partial_cmp(&b.y).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.x.partial_cmp(&b.x).unwrap_or(std::cmp::Ordering::Equal))
    });
    keypoints.truncate(max_count);
    keypoints
}

/// Borrowed f64 plane; DoG levels may go negative so this bypasses the
/// [0, 1] invariant of GrayImage.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn diff(a: &GrayImage, b: &GrayImage) -> Plane {
        Plane {
            w: a.width(),
            h: a.height(),
            v: a
                .data()
                .iter()
                .zip(b.data().iter())
                .map(|(x, y)| x - y)
                .collect(),
        }
    }

    fn get(&self, x: usize, y: usize) -> f64 {
        self.v[y * self.w + x]
    }
}

#[allow(clippy::too_many_arguments)]
fn scan_octave(
    dog: &[Plane],
    gauss: &[GrayImage],
    octave: usize,
    params: &DetectorParams,
    k: f64,
    out: &mut Vec<Keypoint>,
    original: &GrayImage,
) {
    let s = params.intervals;
    let w = dog[0].w;
    let h = dog[0].h;
    let border = params.border.max(1);
    if w <= 2 * border || h <= 2 * border {
        return;
    }
    let peak_thresh = params.contrast_threshold / s as f64;
    let prelim = 0.5 * peak_thresh;
    let scale_factor = (1usize << octave) as f64;

    for lvl in 1..=s {
        for y in border..h - border {
            for x in border..w - border {
                let v = dog[lvl].get(x, y);
                if v.abs() <= prelim || !is_extremum(dog, lvl, x, y, v) {
                    continue;
                }
                let Some(fit) = refine(dog, lvl, x, y, peak_thresh, params, border) else {
                    continue;
                };
                let sigma_oct = params.sigma0 * k.powf(fit.lvl);
                let ori = dominant_orientation(
                    &gauss[fit.lvl.round().clamp(0.0, (s + 2) as f64) as usize],
                    fit.x,
                    fit.y,
                    1.5 * sigma_oct,
                );
                let kp = Keypoint {
                    x: fit.x * scale_factor,
                    y: fit.y * scale_factor,
                    sigma: sigma_oct * scale_factor,
                    response: fit.value,
                    orientation: ori,
                };
                if kp.x >= 0.0
                    && kp.y >= 0.0
                    && kp.x <= (original.width() - 1) as f64
                    && kp.y <= (original.height() - 1) as f64
                {
                    out.push(kp);
                }
            }
        }
    }
}

fn is_extremum(dog: &[Plane], lvl: usize, x: usize, y: usize, v: f64) -> bool {
    let mut is_max = true;
    let mut is_min = true;
    for dl in -1i64..=1 {
        let plane = &dog[(lvl as i64 + dl) as usize];
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dl == 0 && dy == 0 && dx == 0 {
                    continue;
                }
                let nv = plane.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                if nv >= v {
                    is_max = false;
                }
                if nv <= v {
                    is_min = false;
                }
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    is_max || is_min
}

struct Fit {
    x: f64,
    y: f64,
    lvl: f64,
    value: f64,
}

/// 3-D quadratic refinement of an extremum, with contrast and edge tests.
fn refine(
    dog: &[Plane],
    lvl0: usize,
    x0: usize,
    y0: usize,
    peak_thresh: f64,
    params: &DetectorParams,
    border: usize,
) -> Option<Fit> {
    let w = dog[0].w;
    let h = dog[0].h;
    let mut lvl = lvl0 as i64;
    let mut x = x0 as i64;
    let mut y = y0 as i64;

    for it in 0..5 {
        let d = |dl: i64, dy: i64, dx: i64| {
            dog[(lvl + dl) as usize].get((x + dx) as usize, (y + dy) as usize)
        };
        let v = d(0, 0, 0);
        let g = [
            (d(0, 0, 1) - d(0, 0, -1)) / 2.0,
            (d(0, 1, 0) - d(0, -1, 0)) / 2.0,
            (d(1, 0, 0) - d(-1, 0, 0)) / 2.0,
        ];
        let hxx = d(0, 0, 1) + d(0, 0, -1) - 2.0 * v;
        let hyy = d(0, 1, 0) + d(0, -1, 0) - 2.0 * v;
        let hss = d(1, 0, 0) + d(-1, 0, 0) - 2.0 * v;
        let hxy = (d(0, 1, 1) - d(0, 1, -1) - d(0, -1, 1) + d(0, -1, -1)) / 4.0;
        let hxs = (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1)) / 4.0;
        let hys = (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0)) / 4.0;

        // solve H·δ = −g with Cramer's rule
        let m = [[hxx, hxy, hxs], [hxy, hyy, hys], [hxs, hys, hss]];
        let det = det3(&m);
        if det.abs() < 1e-30 {
            return None;
        }
        let rhs = [-g[0], -g[1], -g[2]];
        let offset = solve3(&m, &rhs, det);

        if offset.iter().all(|o| o.abs() < 0.5) {
            // converged: contrast and edge tests at the fitted point
            let peak = v + 0.5 * (g[0] * offset[0] + g[1] * offset[1] + g[2] * offset[2]);
            if peak.abs() < peak_thresh {
                return None;
            }
            let tr = hxx + hyy;
            let det2 = hxx * hyy - hxy * hxy;
            let r = params.edge_ratio;
            if det2 <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det2 {
                return None;
            }
            return Some(Fit {
                x: x as f64 + offset[0],
                y: y as f64 + offset[1],
                lvl: lvl as f64 + offset[2],
                value: peak,
            });
        }

        if it == 4 {
            return None;
        }
        x += offset[0].round() as i64;
        y += offset[1].round() as i64;
        lvl += offset[2].round() as i64;
        if lvl < 1
            || lvl as usize > dog.len() - 2
            || x < border as i64
            || y < border as i64
            || x >= (w - border) as i64
            || y >= (h - border) as i64
        {
            return None;
        }
    }
    None
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn solve3(m: &[[f64; 3]; 3], b: &[f64; 3], det: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let mut mi = *m;
        for r in 0..3 {
            mi[r][i] = b[r];
        }
        out[i] = det3(&mi) / det;
    }
    out
}

/// 36-bin gradient-orientation histogram around (x, y), Gaussian-weighted,
/// lightly smoothed, with a parabolic peak refinement.
fn dominant_orientation(level: &GrayImage, x: f64, y: f64, sigma: f64) -> f64 {
    const BINS: usize = 36;
    let radius = (3.0 * sigma).round().max(1.0) as i64;
    let xi = x.round() as i64;
    let yi = y.round() as i64;
    let w = level.width() as i64;
    let h = level.height() as i64;
    let mut hist = [0.0f64; BINS];
    let denom = 2.0 * sigma * sigma;

    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let px = xi + dx;
            let py = yi + dy;
            if px < 1 || py < 1 || px >= w - 1 || py >= h - 1 {
                continue;
            }
            let gx = level.get((px + 1) as usize, py as usize)
                - level.get((px - 1) as usize, py as usize);
            let gy = level.get(px as usize, (py + 1) as usize)
                - level.get(px as usize, (py - 1) as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let ori = gy.atan2(gx).rem_euclid(TAU);
            let weight = (-((dx * dx + dy * dy) as f64) / denom).exp();
            let bin = ((ori / TAU * BINS as f64).floor() as usize).min(BINS - 1);
            hist[bin] += weight * mag;
        }
    }

    // two passes of circular 3-tap smoothing
    for _ in 0..2 {
        let prev = hist;
        for i in 0..BINS {
            hist[i] =
                (prev[(i + BINS - 1) % BINS] + prev[i] + prev[(i + 1) % BINS]) / 3.0;
        }
    }

    let peak = hist
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let l = hist[(peak + BINS - 1) % BINS];
    let c = hist[peak];
    let r = hist[(peak + 1) % BINS];
    let denom = l - 2.0 * c + r;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    wrap_to_pi((peak as f64 + 0.5 + shift) * TAU / BINS as f64)
}

/// Separable Gaussian blur with replicated borders.
pub(crate) fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.5 * sigma).ceil().max(1.0) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma * sigma;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        kernel.push((-d * d / denom).exp());
    }
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= sum);

    let w = img.width();
    let h = img.height();
    let src = img.data();
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &src[y * w..][..w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sx = (x + i).saturating_sub(radius).min(w - 1);
                acc += kv * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sy = (y + i).saturating_sub(radius).min(h - 1);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    GrayImage::new(w, h, out).expect("blur keeps range")
}

fn downsample(img: &GrayImage) -> GrayImage {
    let w = (img.width() / 2).max(1);
    let h = (img.height() / 2).max(1);
    GrayImage::from_fn(w, h, |x, y| img.get(x * 2, y * 2)).expect("subsample keeps range")
}
