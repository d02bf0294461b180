//! Ground-truth correspondences between two keypoint sets under a homography.

use crate::data::{map_point, Homography, Keypoint};

/// One-to-one keypoint index pairs deemed the same physical point.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub homography: Homography,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Lookup by A-side index.
    pub fn match_for(&self, a_idx: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(a, _)| *a == a_idx)
            .map(|(_, b)| *b)
    }
}

/// Greedy one-to-one assignment under symmetric reprojection distance
/// max(‖H·a − b‖, ‖H⁻¹·b − a‖) ≤ `dist_thresh`, with a scale-ratio test
/// σ_b/(σ_a·s) ∈ [2/3, 3/2] where s is the homography's local scale.
/// Candidates are taken in ascending distance, so each keypoint is matched
/// to its mutually nearest available partner.
pub fn build_correspondences(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h: &Homography,
    dist_thresh: f64,
) -> CorrespondenceSet {
    let empty = CorrespondenceSet {
        pairs: Vec::new(),
        homography: *h,
    };
    let Ok(h_inv) = h.inverse() else {
        return empty;
    };

    struct Candidate {
        dist: f64,
        a: usize,
        b: usize,
    }
    let mut candidates = Vec::new();
    for (ai, ka) in kps_a.iter().enumerate() {
        let Some((px, py)) = map_point(h, ka.x, ka.y) else {
            continue;
        };
        let local = h.local_scale(ka.x, ka.y);
        if !local.is_finite() || local <= 0.0 {
            continue;
        }
        for (bi, kb) in kps_b.iter().enumerate() {
            let fwd = ((px - kb.x).powi(2) + (py - kb.y).powi(2)).sqrt();
            if fwd > dist_thresh {
                continue;
            }
            let Some((qx, qy)) = map_point(&h_inv, kb.x, kb.y) else {
                continue;
            };
            let bwd = ((qx - ka.x).powi(2) + (qy - ka.y).powi(2)).sqrt();
            let dist = fwd.max(bwd);
            if dist > dist_thresh {
                continue;
            }
            let ratio = kb.sigma / (ka.sigma * local);
            if !(2.0 / 3.0..=1.5).contains(&ratio) {
                continue;
            }
            candidates.push(Candidate { dist, a: ai, b: bi });
        }
    }

    candidates.sort_by(|p, q| {
        p.dist
            .partial_cmp(&q.dist)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(p.a.cmp(&q.a))
            .then(p.b.cmp(&q.b))
    });

    let mut used_a = vec![false; kps_a.len()];
    let mut used_b = vec![false; kps_b.len()];
    let mut pairs = Vec::new();
    for cand in candidates {
        if used_a[cand.a] || used_b[cand.b] {
            continue;
        }
        used_a[cand.a] = true;
        used_b[cand.b] = true;
        pairs.push((cand.a, cand.b));
    }
    pairs.sort_unstable();
    CorrespondenceSet {
        pairs,
        homography: *h,
    }
}
