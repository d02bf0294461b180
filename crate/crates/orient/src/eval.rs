//! Matching benchmark: nearest-neighbor matching, precision-recall curves,
//! mAP as area under the curve, and orientation-method comparison with
//! average ranks.

use std::sync::Arc;

use crate::data::{
    build_correspondences, detect_keypoints, extract_patch, GrayImage, Homography, Keypoint,
};
use crate::descriptor::{extract, support_radius, Descriptor, PatchContext};
use crate::error::{Error, Result};
use crate::net::OrientationNet;

/// One nearest-neighbor match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub query: usize,
    pub matched: usize,
    pub distance: f64,
    pub is_correct: bool,
}

/// Matches sorted by ascending distance, ready for PR computation.
#[derive(Debug, Clone, Default)]
pub struct MatchSet {
    matches: Vec<Match>,
}

impl MatchSet {
    /// Builds a match set from externally produced matches, enforcing the
    /// ascending-distance order PR computation expects.
    pub fn from_matches(mut matches: Vec<Match>) -> MatchSet {
        sort_matches(&mut matches);
        MatchSet { matches }
    }

    pub fn matches(&self) -> &[Match] {
        &self.matches
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Each A descriptor matched to its Euclidean nearest neighbor in B; ties
/// break to the lowest B index. Correctness flags are filled in later by the
/// caller (see [`flag_correct`]).
pub fn nn_match(desc_a: &[Descriptor], desc_b: &[Descriptor]) -> Result<MatchSet> {
    if desc_b.is_empty() {
        return Err(Error::invalid("nn_match", "descriptor set B is empty"));
    }
    let mut matches = Vec::with_capacity(desc_a.len());
    for (qi, q) in desc_a.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut best_j = 0usize;
        for (j, d) in desc_b.iter().enumerate() {
            let dist = q.distance_sq(d);
            if dist < best {
                best = dist;
                best_j = j;
            }
        }
        matches.push(Match {
            query: qi,
            matched: best_j,
            distance: best.sqrt(),
            is_correct: false,
        });
    }
    sort_matches(&mut matches);
    Ok(MatchSet { matches })
}

fn sort_matches(matches: &mut [Match]) {
    matches.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.query.cmp(&b.query))
    });
}

/// Marks each match correct iff `truth(query) == Some(matched)`.
pub fn flag_correct(set: &mut MatchSet, truth: impl Fn(usize) -> Option<usize>) {
    for m in &mut set.matches {
        m.is_correct = truth(m.query) == Some(m.matched);
    }
}

/// Precision-recall curve: one point per prefix of the distance-sorted
/// match list.
#[derive(Debug, Clone)]
pub struct PRCurve {
    pub points: Vec<(f64, f64)>, // (recall, precision)
    pub total_positives: usize,
}

/// Sweeps the distance threshold across the sorted matches: after k matches,
/// precision = correct/k and recall = correct/total_positives.
pub fn pr_curve(matches: &MatchSet, total_positives: usize) -> Result<PRCurve> {
    if total_positives == 0 {
        return Err(Error::invalid("pr_curve", "total_positives must be ≥ 1"));
    }
    let mut points = Vec::with_capacity(matches.len());
    let mut correct = 0usize;
    for (k, m) in matches.matches.iter().enumerate() {
        if m.is_correct {
            correct += 1;
        }
        points.push((
            correct as f64 / total_positives as f64,
            correct as f64 / (k + 1) as f64,
        ));
    }
    Ok(PRCurve {
        points,
        total_positives,
    })
}

/// Trapezoidal area under the PR curve over recall ∈ [0, max recall]; the
/// segment from recall 0 carries the first point's precision.
pub fn average_precision(curve: &PRCurve) -> f64 {
    let mut area = 0.0;
    let mut prev = match curve.points.first() {
        Some(&(_, p)) => (0.0, p),
        None => return 0.0,
    };
    for &(r, p) in &curve.points {
        area += (r - prev.0) * 0.5 * (p + prev.1);
        prev = (r, p);
    }
    area
}

pub fn mean_ap(curves: &[PRCurve]) -> Result<f64> {
    if curves.is_empty() {
        return Err(Error::invalid("mean_ap", "need at least one curve"));
    }
    Ok(curves.iter().map(average_precision).sum::<f64>() / curves.len() as f64)
}

/// Orientation assignment strategies compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// The detector's dominant orientation.
    Dominant,
    /// θ = 0 for every keypoint.
    Upright,
    /// The trained network's prediction.
    Learned,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Dominant => "dominant",
            Method::Upright => "upright",
            Method::Learned => "learned",
        }
    }
}

pub const ALL_METHODS: [Method; 3] = [Method::Dominant, Method::Upright, Method::Learned];

#[derive(Debug, Clone)]
pub struct MethodEval {
    pub method: Method,
    pub ap: f64,
    pub matches: usize,
    pub positives: usize,
}

#[derive(Debug, Clone)]
pub struct EvalParams {
    pub max_keypoints: usize,
    pub lambda: f64,
    pub dist_thresh: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            max_keypoints: 1000,
            lambda: crate::descriptor::DEFAULT_LAMBDA,
            dist_thresh: 2.5,
        }
    }
}

/// Full protocol for one image pair: detect (≤ max_keypoints), build
/// ground-truth correspondences under `h`, then per method assign
/// orientations, extract descriptors, nearest-neighbor match and compute AP.
/// Fails with a usage error when no ground-truth correspondences exist
/// (callers skip such sequences with a warning).
pub fn evaluate_methods(
    img_a: &Arc<GrayImage>,
    img_b: &Arc<GrayImage>,
    h: &Homography,
    net: Option<&OrientationNet>,
    methods: &[Method],
    params: &EvalParams,
) -> Result<Vec<MethodEval>> {
    let kps_a = usable_keypoints(img_a, params);
    let kps_b = usable_keypoints(img_b, params);
    let truth = build_correspondences(&kps_a, &kps_b, h, params.dist_thresh);
    if truth.is_empty() {
        return Err(Error::Usage(
            "no ground-truth correspondences for this pair".into(),
        ));
    }
    let positives = truth.len();
    let mut lookup_b = vec![None; kps_a.len()];
    for &(a, b) in &truth.pairs {
        lookup_b[a] = Some(b);
    }

    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let desc_a = method_descriptors(img_a, &kps_a, method, net, params)?;
        let desc_b = method_descriptors(img_b, &kps_b, method, net, params)?;
        let mut set = nn_match(&desc_a, &desc_b)?;
        flag_correct(&mut set, |q| lookup_b[q]);
        let curve = pr_curve(&set, positives)?;
        out.push(MethodEval {
            method,
            ap: average_precision(&curve),
            matches: set.len(),
            positives,
        });
    }
    Ok(out)
}

/// Keypoints whose descriptor support fits in the image for any orientation.
fn usable_keypoints(img: &Arc<GrayImage>, params: &EvalParams) -> Vec<Keypoint> {
    detect_keypoints(img, params.max_keypoints)
        .into_iter()
        .filter(|kp| img.supports_region(kp.x, kp.y, support_radius(kp.sigma, params.lambda)))
        .collect()
}

fn method_descriptors(
    img: &Arc<GrayImage>,
    kps: &[Keypoint],
    method: Method,
    net: Option<&OrientationNet>,
    params: &EvalParams,
) -> Result<Vec<Descriptor>> {
    let mut out = Vec::with_capacity(kps.len());
    for kp in kps {
        let theta = match method {
            Method::Dominant => kp.orientation,
            Method::Upright => 0.0,
            Method::Learned => {
                let net = net.ok_or_else(|| {
                    Error::Usage("learned method requires a trained network".into())
                })?;
                let patch = extract_patch(img, kp, 0.0, params.lambda)?;
                net.predict_orientation(&patch)?.theta
            }
        };
        let ctx = PatchContext::new(img.clone(), kp.x, kp.y, kp.sigma, params.lambda)?;
        out.push(extract(&ctx, theta)?);
    }
    Ok(out)
}

/// Per-sequence APs for several methods plus summary statistics.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub sequences: Vec<(String, Vec<MethodEval>)>,
}

impl EvalReport {
    pub fn push(&mut self, sequence: impl Into<String>, rows: Vec<MethodEval>) {
        self.sequences.push((sequence.into(), rows));
    }

    pub fn methods(&self) -> Vec<Method> {
        self.sequences
            .first()
            .map(|(_, rows)| rows.iter().map(|r| r.method).collect())
            .unwrap_or_default()
    }

    pub fn mean_ap(&self, method: Method) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (_, rows) in &self.sequences {
            if let Some(r) = rows.iter().find(|r| r.method == method) {
                sum += r.ap;
                n += 1;
            }
        }
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// Per-sequence dense ranking by mAP (1 = best, ties share the mean of tied
/// ranks), averaged across sequences.
pub fn rank_methods(report: &EvalReport) -> Result<Vec<(Method, f64)>> {
    let methods = report.methods();
    if methods.is_empty() {
        return Err(Error::invalid("rank_methods", "empty report"));
    }
    let mut rank_sums = vec![0.0f64; methods.len()];
    for (seq, rows) in &report.sequences {
        if rows.len() != methods.len()
            || !methods.iter().all(|m| rows.iter().any(|r| r.method == *m))
        {
            return Err(Error::invalid(
                "rank_methods",
                format!("sequence {seq} is missing method entries"),
            ));
        }
        for (mi, m) in methods.iter().enumerate() {
            let ap = rows.iter().find(|r| r.method == *m).unwrap().ap;
            // mean-of-tied-ranks: count strictly better, plus half the ties
            let better = rows.iter().filter(|r| r.ap > ap).count();
            let tied = rows.iter().filter(|r| r.ap == ap).count();
            let rank = better as f64 + (tied as f64 + 1.0) / 2.0;
            rank_sums[mi] += rank;
        }
    }
    let n = report.sequences.len() as f64;
    Ok(methods
        .into_iter()
        .zip(rank_sums.into_iter().map(|s| s / n))
        .collect())
}
