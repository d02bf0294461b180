//! Generalized hinging hyperplanes: a signed sum of maxima over groups of
//! pre-activation values,
//!
//!   o(y) = Σ_s δ_s · max_m y[s][m],   δ_s = +1 for odd s, −1 for even s
//!
//! with s counted from 1. Any continuous piecewise-linear function can be
//! written this way, and particular wirings of the input reproduce ReLU,
//! maxout and PReLU exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Meta-parameters: S signed summands of M-way maxima per output unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GhhConfig {
    s: usize,
    m: usize,
}

impl GhhConfig {
    pub fn new(s: usize, m: usize) -> Result<Self> {
        if s < 1 || m < 1 {
            return Err(Error::invalid(
                "GhhConfig::new",
                format!("S and M must be ≥ 1, got S={s}, M={m}"),
            ));
        }
        Ok(GhhConfig { s, m })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Pre-activation values consumed per output unit.
    pub fn group_len(&self) -> usize {
        self.s * self.m
    }

    /// δ for the 0-based summand index: +1 where the 1-based index is odd.
    pub fn delta(&self, s_idx: usize) -> f64 {
        if s_idx.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }
}

/// Winner indices recorded on the forward pass, one per (output, summand).
/// The backward pass routes gradient only to these entries.
#[derive(Debug, Clone)]
pub struct GhhState {
    outputs: usize,
    argmax: Vec<usize>, // m-index in [0, M), row-major over (output, s)
}

impl GhhState {
    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn argmax(&self, output: usize, s_idx: usize) -> usize {
        self.argmax[output * (self.argmax.len() / self.outputs) + s_idx]
    }
}

/// Forward pass over a tensor shaped [outputs, S, M] (or any shape whose
/// trailing grouping matches S·M). Ties pick the first winner in m order.
pub fn ghh_forward(y: &Tensor, config: GhhConfig) -> Result<(Tensor, GhhState)> {
    let group = config.group_len();
    if y.is_empty() || !y.len().is_multiple_of(group) {
        return Err(Error::invalid(
            "ghh_forward",
            format!(
                "input length {} is not a multiple of S·M = {}·{}",
                y.len(),
                config.s,
                config.m
            ),
        ));
    }
    if y.rank() >= 2 {
        let r = y.rank();
        if y.dim(r - 1) != config.m || (r >= 3 && y.dim(r - 2) != config.s) {
            return Err(Error::invalid(
                "ghh_forward",
                format!(
                    "trailing dimensions of {:?} do not match grouping [S={}, M={}]",
                    y.shape(),
                    config.s,
                    config.m
                ),
            ));
        }
    }
    let outputs = y.len() / group;
    let (out, state) = ghh_forward_slice(y.data(), outputs, config);
    Ok((Tensor::from_vec(&[outputs], out)?, state))
}

/// Slice-level forward used by the network's fully-connected layers.
pub fn ghh_forward_slice(y: &[f64], outputs: usize, config: GhhConfig) -> (Vec<f64>, GhhState) {
    debug_assert_eq!(y.len(), outputs * config.group_len());
    let mut out = Vec::with_capacity(outputs);
    let mut argmax = Vec::with_capacity(outputs * config.s);
    for u in 0..outputs {
        let base = u * config.group_len();
        let mut acc = 0.0;
        for s_idx in 0..config.s {
            let grp = &y[base + s_idx * config.m..][..config.m];
            let mut best = grp[0];
            let mut best_m = 0;
            for (mi, &v) in grp.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_m = mi;
                }
            }
            acc += config.delta(s_idx) * best;
            argmax.push(best_m);
        }
        out.push(acc);
    }
    (out, GhhState { outputs, argmax })
}

/// Routes δ_s·grad to the recorded winner of each group, zero elsewhere.
pub fn ghh_backward(grad_out: &Tensor, state: &GhhState, config: GhhConfig) -> Result<Tensor> {
    if grad_out.len() != state.outputs || state.argmax.len() != state.outputs * config.s {
        return Err(Error::Usage(
            "ghh_backward: state does not match this gradient/config (stale forward?)".into(),
        ));
    }
    let g = ghh_backward_slice(grad_out.data(), state, config);
    Tensor::from_vec(&[state.outputs, config.s, config.m], g)
}

pub fn ghh_backward_slice(grad_out: &[f64], state: &GhhState, config: GhhConfig) -> Vec<f64> {
    debug_assert_eq!(grad_out.len(), state.outputs);
    let mut g = vec![0.0; state.outputs * config.group_len()];
    for u in 0..state.outputs {
        for s_idx in 0..config.s {
            let m_idx = state.argmax[u * config.s + s_idx];
            g[u * config.group_len() + s_idx * config.m + m_idx] =
                config.delta(s_idx) * grad_out[u];
        }
    }
    g
}

/// A configuration plus the fixed input-construction rule under which GHH
/// reproduces a named activation exactly.
#[derive(Debug, Clone)]
pub struct Wiring {
    pub config: GhhConfig,
    kind: WiringKind,
}

#[derive(Debug, Clone)]
enum WiringKind {
    Relu,
    Maxout,
    Prelu { alpha: f64 },
}

impl Wiring {
    /// Grouped pre-activation vector for one unit. ReLU and PReLU take a
    /// single raw value; maxout takes M of them.
    pub fn wire(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            WiringKind::Relu => vec![0.0, x[0]],
            WiringKind::Maxout => {
                debug_assert_eq!(x.len(), self.config.m);
                x.to_vec()
            }
            // group 1 = {0, x}, group 2 = {0, −αx}:
            // o = max(0, x) − max(0, −αx) = PReLU(x)
            WiringKind::Prelu { alpha } => vec![0.0, x[0], 0.0, -alpha * x[0]],
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let wired = self.wire(x);
        let (out, _) = ghh_forward_slice(&wired, 1, self.config);
        out[0]
    }
}

/// S=1, M=2 with a hard-zero slot: max(0, x).
pub fn as_relu() -> Wiring {
    Wiring {
        config: GhhConfig::new(1, 2).unwrap(),
        kind: WiringKind::Relu,
    }
}

/// S=1: the signed sum collapses to a plain M-way max.
pub fn as_maxout(m: usize) -> Result<Wiring> {
    if m < 2 {
        return Err(Error::invalid("as_maxout", "maxout needs M ≥ 2"));
    }
    Ok(Wiring {
        config: GhhConfig::new(1, m)?,
        kind: WiringKind::Maxout,
    })
}

/// S=2, M=2: max(0,x) − max(0,−αx) = PReLU with slope α on the negative side.
pub fn as_prelu(alpha: f64) -> Wiring {
    Wiring {
        config: GhhConfig::new(2, 2).unwrap(),
        kind: WiringKind::Prelu { alpha },
    }
}
