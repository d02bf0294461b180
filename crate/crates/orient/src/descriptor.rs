//! From-scratch SIFT-style descriptor, rotation-sampled descriptor tables,
//! and numeric derivatives with respect to orientation.
//!
//! The descriptor is a Gaussian-weighted 4×4×8 histogram of gradient
//! orientations over a rotated 16×16 sampling grid, normalized, clamped at
//! 0.2 and renormalized. A [`DescriptorTable`] holds one descriptor every 5°
//! (72 entries); the trainer only ever sees tables, so the descriptor stays
//! a black box and any drop-in replacement that can fill a table works.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::data::GrayImage;
use crate::error::{Error, Result};

pub const DESCRIPTOR_DIM: usize = 128;
pub const TABLE_STEPS: usize = 72;
/// 5° in radians.
pub const TABLE_STEP_RAD: f64 = TAU / TABLE_STEPS as f64;

const SPATIAL_CELLS: usize = 4;
const ORI_BINS: usize = 8;
const SAMPLE_GRID: usize = 16;
const CLAMP: f64 = 0.2;
/// Descriptor support scale: the sampling window spans ±λ·σ.
pub const DEFAULT_LAMBDA: f64 = 7.5;

const TABLE_MAGIC: &[u8; 4] = b"ODSC";
const TABLE_VERSION: u32 = 1;

/// Grid angle k·5°, computed as TAU·(k/72) so that e.g. k = 18 is bit-equal
/// to FRAC_PI_2.
pub fn table_angle(k: usize) -> f64 {
    TAU * (k as f64 / TABLE_STEPS as f64)
}

/// 128 non-negative reals; Euclidean norm 1, or exactly 0 for featureless
/// patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    v: [f64; DESCRIPTOR_DIM],
}

impl Descriptor {
    pub fn zero() -> Self {
        Descriptor {
            v: [0.0; DESCRIPTOR_DIM],
        }
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != DESCRIPTOR_DIM {
            return Err(Error::shape(
                "Descriptor::from_slice",
                format!("expected {DESCRIPTOR_DIM} values, got {}", s.len()),
            ));
        }
        let mut v = [0.0; DESCRIPTOR_DIM];
        v.copy_from_slice(s);
        Ok(Descriptor { v })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn norm(&self) -> f64 {
        self.v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn distance_sq(&self, other: &Descriptor) -> f64 {
        self.v
            .iter()
            .zip(other.v.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.v.iter().all(|x| *x == 0.0)
    }
}

/// Identity of the keypoint a table was built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointRef {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

/// Everything needed to sample descriptors of one keypoint at any
/// orientation.
#[derive(Debug, Clone)]
pub struct PatchContext {
    pub image: Arc<GrayImage>,
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub lambda: f64,
}

/// Circumradius of the descriptor sampling grid (the wider of the two
/// sampling footprints used in this crate).
pub fn support_radius(sigma: f64, lambda: f64) -> f64 {
    // 18×18 grid at spacing λσ/8, corners at 8.5 spacings on both axes
    let spacing = lambda * sigma / (SAMPLE_GRID / 2) as f64;
    8.5 * spacing * std::f64::consts::SQRT_2
}

impl PatchContext {
    pub fn new(image: Arc<GrayImage>, x: f64, y: f64, sigma: f64, lambda: f64) -> Result<Self> {
        if sigma <= 0.0 || lambda <= 0.0 {
            return Err(Error::invalid(
                "PatchContext::new",
                format!("sigma {sigma} and lambda {lambda} must be positive"),
            ));
        }
        if !image.supports_region(x, y, support_radius(sigma, lambda)) {
            return Err(Error::invalid(
                "PatchContext::new",
                format!("support region at ({x}, {y}), sigma {sigma} leaves the image"),
            ));
        }
        Ok(PatchContext {
            image,
            x,
            y,
            sigma,
            lambda,
        })
    }
}

/// Descriptors of one patch at the 72 grid orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorTable {
    pub source: KeypointRef,
    entries: Vec<Descriptor>,
}

impl DescriptorTable {
    pub fn from_entries(source: KeypointRef, entries: Vec<Descriptor>) -> Result<Self> {
        if entries.len() != TABLE_STEPS {
            return Err(Error::invalid(
                "DescriptorTable::from_entries",
                format!("expected {TABLE_STEPS} entries, got {}", entries.len()),
            ));
        }
        Ok(DescriptorTable { source, entries })
    }

    pub fn entry(&self, k: usize) -> &Descriptor {
        &self.entries[k]
    }

    pub fn entries(&self) -> &[Descriptor] {
        &self.entries
    }

    /// Angular mirror: entry k becomes entry −k mod 72. Used by the Jacobian
    /// antisymmetry property.
    pub fn reversed(&self) -> DescriptorTable {
        let entries = (0..TABLE_STEPS)
            .map(|k| self.entries[(TABLE_STEPS - k) % TABLE_STEPS].clone())
            .collect();
        DescriptorTable {
            source: self.source,
            entries,
        }
    }
}

/// Gaussian spatial weights of the 16×16 interior samples; fixed grid, so
/// computed once.
fn spatial_weights() -> &'static [f64; SAMPLE_GRID * SAMPLE_GRID] {
    static W: OnceLock<[f64; SAMPLE_GRID * SAMPLE_GRID]> = OnceLock::new();
    W.get_or_init(|| {
        let mut w = [0.0; SAMPLE_GRID * SAMPLE_GRID];
        let sigma_w = (SAMPLE_GRID / 2) as f64; // half the window width
        for r in 0..SAMPLE_GRID {
            for c in 0..SAMPLE_GRID {
                let vc = r as f64 - 7.5;
                let uc = c as f64 - 7.5;
                w[r * SAMPLE_GRID + c] =
                    (-(uc * uc + vc * vc) / (2.0 * sigma_w * sigma_w)).exp();
            }
        }
        w
    })
}

/// Descriptor of the context patch at orientation `theta`: samples a rotated
/// grid, takes gradients in the rotated frame (orientations are therefore
/// measured relative to `theta`), and accumulates the weighted histogram
/// with trilinear binning.
pub fn extract(ctx: &PatchContext, theta: f64) -> Result<Descriptor> {
    if !ctx
        .image
        .supports_region(ctx.x, ctx.y, support_radius(ctx.sigma, ctx.lambda))
    {
        return Err(Error::invalid(
            "descriptor::extract",
            "support region leaves the image",
        ));
    }
    let theta = crate::util::wrap_to_tau(theta);
    let spacing = ctx.lambda * ctx.sigma / (SAMPLE_GRID / 2) as f64;
    let (sin_t, cos_t) = theta.sin_cos();

    // 18×18 samples: one extra ring for central differences
    const G: usize = SAMPLE_GRID + 2;
    let mut grid = [0.0f64; G * G];
    for r in 0..G {
        let v = (r as f64 - 8.5) * spacing;
        for c in 0..G {
            let u = (c as f64 - 8.5) * spacing;
            let px = ctx.x + cos_t * u - sin_t * v;
            let py = ctx.y + sin_t * u + cos_t * v;
            grid[r * G + c] = ctx.image.sample_bilinear(px, py);
        }
    }

    let weights = spatial_weights();
    let mut hist = [0.0f64; DESCRIPTOR_DIM];
    for r in 0..SAMPLE_GRID {
        for c in 0..SAMPLE_GRID {
            let gr = r + 1;
            let gc = c + 1;
            let gu = grid[gr * G + gc + 1] - grid[gr * G + gc - 1];
            let gv = grid[(gr + 1) * G + gc] - grid[(gr - 1) * G + gc];
            let mag = (gu * gu + gv * gv).sqrt();
            if mag == 0.0 {
                continue;
            }
            let ori = gv.atan2(gu).rem_euclid(TAU);
            let w = weights[r * SAMPLE_GRID + c] * mag;

            // trilinear binning over (row cell, col cell, orientation)
            let rbin = (r as f64 - 7.5) / 4.0 + 1.5;
            let cbin = (c as f64 - 7.5) / 4.0 + 1.5;
            let obin = ori / TAU * ORI_BINS as f64;
            let r0 = rbin.floor();
            let c0 = cbin.floor();
            let o0 = obin.floor();
            let dr = rbin - r0;
            let dc = cbin - c0;
            let dob = obin - o0;

            for (ri, rw) in [(r0 as i64, 1.0 - dr), (r0 as i64 + 1, dr)] {
                if !(0..SPATIAL_CELLS as i64).contains(&ri) {
                    continue;
                }
                for (ci, cw) in [(c0 as i64, 1.0 - dc), (c0 as i64 + 1, dc)] {
                    if !(0..SPATIAL_CELLS as i64).contains(&ci) {
                        continue;
                    }
                    for (oi, ow) in [(o0 as i64, 1.0 - dob), (o0 as i64 + 1, dob)] {
                        let o = (oi.rem_euclid(ORI_BINS as i64)) as usize;
                        let idx = (ri as usize * SPATIAL_CELLS + ci as usize) * ORI_BINS + o;
                        hist[idx] += w * rw * cw * ow;
                    }
                }
            }
        }
    }

    Ok(normalize_clamped(hist))
}

fn normalize_clamped(mut hist: [f64; DESCRIPTOR_DIM]) -> Descriptor {
    let norm = hist.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Descriptor::zero();
    }
    for v in &mut hist {
        *v = (*v / norm).min(CLAMP);
    }
    let norm = hist.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Descriptor::zero();
    }
    for v in &mut hist {
        *v /= norm;
    }
    Descriptor { v: hist }
}

/// 72 descriptors at the 5° grid angles.
pub fn build_table(ctx: &PatchContext, id: u64) -> Result<DescriptorTable> {
    let mut entries = Vec::with_capacity(TABLE_STEPS);
    for k in 0..TABLE_STEPS {
        entries.push(extract(ctx, table_angle(k))?);
    }
    Ok(DescriptorTable {
        source: KeypointRef {
            id,
            x: ctx.x,
            y: ctx.y,
            sigma: ctx.sigma,
        },
        entries,
    })
}

/// Cell position of an angle within the table: (lower index, fraction).
/// Angles within 1e−9 of a grid point snap onto it so grid lookups return
/// stored entries bit-exactly.
fn table_cell(theta: f64) -> (usize, f64) {
    let t = crate::util::wrap_to_tau(theta) / TABLE_STEP_RAD;
    let mut k = t.floor() as usize;
    let mut f = t - k as f64;
    if k >= TABLE_STEPS {
        k = 0;
        f = 0.0;
    }
    if f < 1e-9 {
        f = 0.0;
    } else if f > 1.0 - 1e-9 {
        k = (k + 1) % TABLE_STEPS;
        f = 0.0;
    }
    (k, f)
}

/// Fractional position of an angle within its table cell, in [0, 1). Used
/// by verification code to keep finite-difference probes away from the
/// interpolation knots.
pub fn grid_fraction(theta: f64) -> f64 {
    table_cell(theta).1
}

/// Linear interpolation between the two bracketing grid entries, followed by
/// renormalization to unit length (zero stays zero; exact grid angles return
/// the stored entry unchanged).
pub fn lookup(table: &DescriptorTable, theta: f64) -> Descriptor {
    let (k, f) = table_cell(theta);
    if f == 0.0 {
        return table.entries[k].clone();
    }
    let a = &table.entries[k];
    let b = &table.entries[(k + 1) % TABLE_STEPS];
    let mut v = [0.0f64; DESCRIPTOR_DIM];
    for (i, vi) in v.iter_mut().enumerate() {
        *vi = (1.0 - f) * a.v[i] + f * b.v[i];
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Descriptor::zero();
    }
    for x in &mut v {
        *x /= norm;
    }
    Descriptor { v }
}

/// Lookup plus the exact derivative of the renormalized interpolation with
/// respect to θ. This is the derivative the Siamese trainer differentiates
/// through; it is still built entirely from the 5° table.
pub fn lookup_with_grad(
    table: &DescriptorTable,
    theta: f64,
) -> (Descriptor, [f64; DESCRIPTOR_DIM]) {
    let (k, f) = table_cell(theta);
    let a = &table.entries[k];
    let b = &table.entries[(k + 1) % TABLE_STEPS];
    let mut v = [0.0f64; DESCRIPTOR_DIM];
    let mut dv = [0.0f64; DESCRIPTOR_DIM];
    for i in 0..DESCRIPTOR_DIM {
        v[i] = (1.0 - f) * a.v[i] + f * b.v[i];
        dv[i] = (b.v[i] - a.v[i]) / TABLE_STEP_RAD;
    }
    let norm_sq = v.iter().map(|x| x * x).sum::<f64>();
    let norm = norm_sq.sqrt();
    if norm < 1e-12 {
        return (Descriptor::zero(), [0.0; DESCRIPTOR_DIM]);
    }
    let mut g = [0.0f64; DESCRIPTOR_DIM];
    let v_dot_dv: f64 = v.iter().zip(dv.iter()).map(|(x, y)| x * y).sum();
    for i in 0..DESCRIPTOR_DIM {
        // d/dθ (v/‖v‖) = dv/‖v‖ − v (v·dv)/‖v‖³
        g[i] = dv[i] / norm - v[i] * v_dot_dv / (norm_sq * norm);
        v[i] /= norm;
    }
    (Descriptor { v }, g)
}

/// Central difference over one table step: (lookup(θ+Δ) − lookup(θ−Δ)) / 2Δ
/// with Δ = 5°.
pub fn jacobian(table: &DescriptorTable, theta: f64) -> [f64; DESCRIPTOR_DIM] {
    let plus = lookup(table, theta + TABLE_STEP_RAD);
    let minus = lookup(table, theta - TABLE_STEP_RAD);
    let mut j = [0.0f64; DESCRIPTOR_DIM];
    for (i, ji) in j.iter_mut().enumerate() {
        *ji = (plus.v[i] - minus.v[i]) / (2.0 * TABLE_STEP_RAD);
    }
    j
}

pub fn save_tables(path: &Path, tables: &[DescriptorTable]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TABLE_MAGIC)?;
    w.write_u32::<LittleEndian>(TABLE_VERSION)?;
    w.write_u32::<LittleEndian>(TABLE_STEPS as u32)?;
    w.write_u32::<LittleEndian>(DESCRIPTOR_DIM as u32)?;
    w.write_u32::<LittleEndian>(tables.len() as u32)?;
    for t in tables {
        write_table_block(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tables(path: &Path) -> Result<Vec<DescriptorTable>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::Ingestion {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?);
    let name = path.display().to_string();
    let bad = |detail: String| Error::Ingestion {
        path: name.clone(),
        detail,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| bad(format!("missing header: {e}")))?;
    if &magic != TABLE_MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| bad(e.to_string()))?;
    if version != TABLE_VERSION {
        return Err(bad(format!("version {version}, expected {TABLE_VERSION}")));
    }
    let k = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
    let dim = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
    if k as usize != TABLE_STEPS || dim as usize != DESCRIPTOR_DIM {
        return Err(bad(format!(
            "table grid {k}x{dim}, expected {TABLE_STEPS}x{DESCRIPTOR_DIM}"
        )));
    }
    let count = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    let mut tables = Vec::with_capacity(count);
    for record in 0..count {
        let t = read_table_block(&mut r).map_err(|e| Error::IngestionRecord {
            path: name.clone(),
            record,
            detail: e.to_string(),
        })?;
        tables.push(t);
    }
    Ok(tables)
}

pub(crate) fn write_table_block(w: &mut impl Write, t: &DescriptorTable) -> Result<()> {
    w.write_u64::<LittleEndian>(t.source.id)?;
    w.write_f64::<LittleEndian>(t.source.x)?;
    w.write_f64::<LittleEndian>(t.source.y)?;
    w.write_f64::<LittleEndian>(t.source.sigma)?;
    for e in &t.entries {
        for &v in e.as_slice() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub(crate) fn read_table_block(r: &mut impl Read) -> Result<DescriptorTable> {
    let id = r.read_u64::<LittleEndian>()?;
    let x = r.read_f64::<LittleEndian>()?;
    let y = r.read_f64::<LittleEndian>()?;
    let sigma = r.read_f64::<LittleEndian>()?;
    let mut entries = Vec::with_capacity(TABLE_STEPS);
    let mut buf = [0.0f64; DESCRIPTOR_DIM];
    for _ in 0..TABLE_STEPS {
        r.read_f64_into::<LittleEndian>(&mut buf)?;
        entries.push(Descriptor { v: buf });
    }
    Ok(DescriptorTable {
        source: KeypointRef { id, x, y, sigma },
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{warp_image, Homography};
    use std::f64::consts::FRAC_PI_2;

    fn smooth_image(seed: u64) -> Arc<GrayImage> {
        use crate::util::{derive_rng, Stream};
        use rand::Rng;
        let mut rng = derive_rng(seed, Stream::Synth);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..24)
            .map(|_| {
                (
                    rng.random_range(20.0..108.0),
                    rng.random_range(20.0..108.0),
                    rng.random_range(4.0..14.0),
                    rng.random_range(-0.35..0.35),
                )
            })
            .collect();
        Arc::new(
            GrayImage::from_fn(128, 128, |x, y| {
                let (xf, yf) = (x as f64, y as f64);
                let mut v = 0.5;
                for &(cx, cy, s, a) in &blobs {
                    let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                    v += a * (-d2 / (2.0 * s * s)).exp();
                }
                v.clamp(0.0, 1.0)
            })
            .unwrap(),
        )
    }

    fn ctx(image: Arc<GrayImage>, sigma: f64) -> PatchContext {
        PatchContext::new(image, 64.0, 64.0, sigma, DEFAULT_LAMBDA).unwrap()
    }

    #[test]
    fn constant_patch_gives_zero_descriptor() {
        let img = Arc::new(GrayImage::from_fn(96, 96, |_, _| 0.3).unwrap());
        let c = ctx(img, 2.0);
        let d = extract(&c, 0.4).unwrap();
        assert!(d.is_zero());
    }

    #[test]
    fn descriptor_is_2pi_periodic_exactly() {
        let c = ctx(smooth_image(1), 2.0);
        for &theta in &[0.0, 0.5, 1.25, 2.5, 5.0] {
            let a = extract(&c, theta).unwrap();
            let b = extract(&c, theta + TAU).unwrap();
            assert_eq!(a, b, "theta {theta}");
        }
    }

    #[test]
    fn descriptor_norm_and_clamp_invariants() {
        let c = ctx(smooth_image(2), 2.5);
        for k in 0..8 {
            let d = extract(&c, k as f64 * 0.7).unwrap();
            let n = d.norm();
            assert!(
                (n - 1.0).abs() < 1e-12 || n == 0.0,
                "norm {n} neither unit nor zero"
            );
            for &v in d.as_slice() {
                assert!(v >= 0.0);
                // one clamp-renormalize pass can lift entries moderately
                // above the clamp bound
                assert!(v <= CLAMP + 0.15, "entry {v} above clamp+tolerance");
            }
        }
    }

    #[test]
    fn rotation_equivariance_on_smooth_images() {
        for seed in [3u64, 4, 5] {
            let img = smooth_image(seed);
            let c = ctx(img.clone(), 2.0);
            let phi = 0.6;
            let warp = Homography::similarity((64.0, 64.0), phi, 1.0, 0.0, 0.0);
            let rotated = Arc::new(warp_image(&img, &warp).unwrap());
            let c_rot = ctx(rotated, 2.0);
            for &theta in &[0.0, 1.0] {
                let a = extract(&c, theta).unwrap();
                let b = extract(&c_rot, theta + phi).unwrap();
                let dist = a.distance(&b);
                assert!(dist < 0.15, "seed {seed} theta {theta}: L2 {dist}");
            }
        }
    }

    #[test]
    fn table_grid_alignment_is_exact() {
        let c = ctx(smooth_image(6), 2.0);
        let table = build_table(&c, 7).unwrap();
        assert_eq!(table.entry(0), &extract(&c, 0.0).unwrap());
        assert_eq!(table.entry(18), &extract(&c, FRAC_PI_2).unwrap());
        for e in table.entries() {
            let n = e.norm();
            assert!((n - 1.0).abs() < 1e-12 || n == 0.0);
        }
        assert_eq!(table.source.id, 7);
    }

    #[test]
    fn lookup_at_grid_returns_stored_entry() {
        let c = ctx(smooth_image(7), 2.0);
        let table = build_table(&c, 0).unwrap();
        for k in [0usize, 1, 18, 35, 71] {
            assert_eq!(&lookup(&table, table_angle(k)), table.entry(k));
        }
        // wrapping: −5° is grid entry 71
        assert_eq!(&lookup(&table, -TABLE_STEP_RAD), table.entry(71));
    }

    #[test]
    fn lookup_between_identical_neighbors_is_that_descriptor() {
        let c = ctx(smooth_image(8), 2.0);
        let d = extract(&c, 0.0).unwrap();
        let entries = vec![d.clone(); TABLE_STEPS];
        let table = DescriptorTable::from_entries(
            KeypointRef { id: 0, x: 0.0, y: 0.0, sigma: 1.0 },
            entries,
        )
        .unwrap();
        let mid = lookup(&table, 0.5 * TABLE_STEP_RAD);
        for (a, b) in mid.as_slice().iter().zip(d.as_slice().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lookup_interpolation_is_convex_before_renormalization() {
        let c = ctx(smooth_image(9), 2.0);
        let table = build_table(&c, 0).unwrap();
        let mut rng = crate::util::derive_rng(10, crate::util::Stream::Synth);
        use rand::Rng;
        for _ in 0..50 {
            let theta: f64 = rng.random_range(0.0..TAU);
            let (k, f) = super::table_cell(theta);
            let a = table.entry(k);
            let b = table.entry((k + 1) % TABLE_STEPS);
            let gap = a.distance(b);
            // raw interpolation lies on the segment between the neighbors
            let mut raw = [0.0; DESCRIPTOR_DIM];
            for (i, ri) in raw.iter_mut().enumerate() {
                *ri = (1.0 - f) * a.as_slice()[i] + f * b.as_slice()[i];
            }
            let raw = Descriptor { v: raw };
            assert!(raw.distance(a) <= gap + 1e-12);
            assert!(raw.distance(b) <= gap + 1e-12);
            // after renormalization the result stays near both neighbors
            let out = lookup(&table, theta);
            assert!(out.distance(a) <= gap + 0.05);
            assert!(out.distance(b) <= gap + 0.05);
        }
    }

    #[test]
    fn jacobian_of_constant_table_is_zero() {
        let d = extract(&ctx(smooth_image(11), 2.0), 0.0).unwrap();
        let table = DescriptorTable::from_entries(
            KeypointRef { id: 0, x: 0.0, y: 0.0, sigma: 1.0 },
            vec![d; TABLE_STEPS],
        )
        .unwrap();
        let j = jacobian(&table, 1.234);
        assert!(j.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn jacobian_matches_analytic_on_cosine_table() {
        // entry k = (cos θ_k, sin θ_k, 0, …): unit norm by construction, so
        // the central difference is (−sin θ, cos θ)·sinc(Δ) at grid angles.
        let entries: Vec<Descriptor> = (0..TABLE_STEPS)
            .map(|k| {
                let mut v = [0.0; DESCRIPTOR_DIM];
                v[0] = table_angle(k).cos();
                v[1] = table_angle(k).sin();
                Descriptor { v }
            })
            .collect();
        let table = DescriptorTable::from_entries(
            KeypointRef { id: 0, x: 0.0, y: 0.0, sigma: 1.0 },
            entries,
        )
        .unwrap();
        let mut worst = 0.0f64;
        for k in 0..TABLE_STEPS {
            let theta = table_angle(k);
            let j = jacobian(&table, theta);
            worst = worst.max((j[0] - (-theta.sin())).abs());
            worst = worst.max((j[1] - theta.cos()).abs());
        }
        assert!(worst < 0.01, "max abs error {worst}");
    }

    #[test]
    fn jacobian_antisymmetric_under_table_reversal() {
        let c = ctx(smooth_image(12), 2.0);
        let table = build_table(&c, 0).unwrap();
        let rev = table.reversed();
        for k in [0usize, 5, 18, 40] {
            let theta = table_angle(k);
            let j = jacobian(&table, theta);
            let jr = jacobian(&rev, -theta);
            for i in 0..DESCRIPTOR_DIM {
                assert!(
                    (j[i] + jr[i]).abs() < 1e-12,
                    "k={k} i={i}: {} vs {}",
                    j[i],
                    jr[i]
                );
            }
        }
    }

    #[test]
    fn lookup_grad_matches_finite_differences() {
        let c = ctx(smooth_image(13), 2.0);
        let table = build_table(&c, 0).unwrap();
        let h = 1e-7;
        for &theta in &[0.3, 1.1, 2.9, 4.4] {
            // keep the probe inside one cell
            let (_, f) = super::table_cell(theta);
            assert!(f > 1e-3 && f < 1.0 - 1e-3);
            let (_, g) = lookup_with_grad(&table, theta);
            let plus = lookup(&table, theta + h);
            let minus = lookup(&table, theta - h);
            for (i, gi) in g.iter().enumerate() {
                let fd = (plus.as_slice()[i] - minus.as_slice()[i]) / (2.0 * h);
                assert!((fd - gi).abs() < 1e-5, "theta {theta} i {i}: fd {fd} vs {gi}");
            }
        }
    }

    #[test]
    fn table_file_round_trip_and_truncation() {
        let c = ctx(smooth_image(14), 2.0);
        let tables = vec![build_table(&c, 1).unwrap(), build_table(&c, 2).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tables.bin");
        save_tables(&path, &tables).unwrap();
        let back = load_tables(&path).unwrap();
        assert_eq!(tables, back);

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
        match load_tables(&cut).unwrap_err() {
            Error::IngestionRecord { record, .. } => assert_eq!(record, 1),
            other => panic!("wrong error {other}"),
        }
    }
}
