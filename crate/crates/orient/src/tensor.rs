//! Dense tensors, named parameter sets, ADAM, and finite-difference checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform values in ±limit, drawn element by element in row-major order.
    pub fn uniform(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of elementwise products; shapes must match.
    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Named parameters with a fixed, deterministic iteration order.
/// Shapes are frozen at insertion; names are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::invalid(
                "ParamSet::insert",
                format!("duplicate parameter name {name:?}"),
            ));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Same names and shapes, all zeros. The natural container for gradients.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    /// Checks `other` has identical names (in order) and shapes.
    pub fn check_aligned(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid(op, "parameter names differ"));
        }
        for ((n, a), (_, b)) in self.iter().zip(other.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    op,
                    format!("parameter {n}: {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `self += scale * other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert_eq!(self.names, other.names);
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            a.add_scaled(b, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: one first- and second-moment tensor per parameter.
/// The learning-rate schedule lives with the caller; `lr` here is whatever
/// the schedule currently says.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::invalid("AdamState::new", "learning rate must be > 0"));
        }
        Ok(AdamState {
            m: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One ADAM update with bias correction. Rejects non-finite gradients,
/// naming the offending parameter.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState) -> Result<()> {
    params.check_aligned(grads, "adam_step")?;
    if state.m.len() != params.len() {
        return Err(Error::invalid("adam_step", "state not initialized for these parameters"));
    }
    for (idx, (name, g)) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        debug_assert_eq!(state.m[idx].shape(), g.shape());
        let _ = name;
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);

    for idx in 0..params.len() {
        let g = grads.tensors[idx].data();
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let w = params.tensors[idx].data_mut();
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Central-difference check of `analytic` against the numeric gradient of `f`
/// over every coordinate of `params`. Returns the worst relative error.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&ParamSet) -> Result<f64>,
    params: &mut ParamSet,
    analytic: &ParamSet,
    h: f64,
) -> Result<f64> {
    let coords: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|p| (0..params.tensor(p).len()).map(move |i| (p, i)))
        .collect();
    finite_difference_check_coords(f, params, analytic, h, &coords)
}

/// Same check restricted to chosen (parameter, element) coordinates; used
/// when the parameter set is too big to probe exhaustively.
pub fn finite_difference_check_coords(
    f: &mut dyn FnMut(&ParamSet) -> Result<f64>,
    params: &mut ParamSet,
    analytic: &ParamSet,
    h: f64,
    coords: &[(usize, usize)],
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::invalid("finite_difference_check", "h must be > 0"));
    }
    params.check_aligned(analytic, "finite_difference_check")?;
    let base = f(params)?;
    if !base.is_finite() {
        return Err(Error::invalid(
            "finite_difference_check",
            format!("f evaluates to non-finite value {base}"),
        ));
    }

    let mut worst = 0.0f64;
    for &(p, i) in coords {
        let orig = params.tensor(p).data()[i];
        params.tensor_mut(p).data_mut()[i] = orig + h;
        let plus = f(params)?;
        params.tensor_mut(p).data_mut()[i] = orig - h;
        let minus = f(params)?;
        params.tensor_mut(p).data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::invalid(
                "finite_difference_check",
                "f evaluates to non-finite value under perturbation",
            ));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let exact = analytic.tensor(p).data()[i];
        worst = worst.max(relative_error(numeric, exact));
    }
    Ok(worst)
}

/// |a − b| / max(|a|, |b|), zero when both are (numerically) zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
