//! Layer primitives with hand-derived backward passes.
//!
//! Conventions: activations are NCHW tensors, convolution is valid (no
//! padding) cross-correlation, pooling is 2×2 with stride 2. Gradients are
//! accumulated in the same order as the reference nested loops so results
//! match the oracles bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Valid cross-correlation plus bias. Input [n, c, h, w], kernel
/// [o, c, kh, kw], bias [o]; output [n, o, h−kh+1, w−kw+1].
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = shape4(input, "conv2d input")?;
    let (oc, kc, kh, kw) = shape4(kernel, "conv2d kernel")?;
    if bias.rank() != 1 || bias.dim(0) != oc {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {oc} output channels", bias.shape()),
        ));
    }
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kc} input channels, input has {c}"),
        ));
    }
    if kh > h || kw > w {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than input {h}x{w}"),
        ));
    }
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut out = Tensor::zeros(&[n, oc, oh, ow]);

    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let y = out.data_mut();
    for ni in 0..n {
        for o in 0..oc {
            let y_plane = &mut y[((ni * oc) + o) * oh * ow..][..oh * ow];
            y_plane.fill(b[o]);
            for ci in 0..c {
                let x_plane = &x[((ni * c) + ci) * h * w..][..h * w];
                let k_plane = &k[((o * c) + ci) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = k_plane[ky * kw + kx];
                        for oy in 0..oh {
                            let x_row = &x_plane[(oy + ky) * w + kx..][..ow];
                            let y_row = &mut y_plane[oy * ow..][..ow];
                            for (yv, xv) in y_row.iter_mut().zip(x_row.iter()) {
                                *yv += kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<Conv2dGrads> {
    let (n, c, h, w) = shape4(input, "conv2d_backward input")?;
    let (oc, _, kh, kw) = shape4(kernel, "conv2d_backward kernel")?;
    let (gn, go, oh, ow) = shape4(grad_out, "conv2d_backward grad")?;
    if gn != n || go != oc || oh != h - kh + 1 || ow != w - kw + 1 {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad shape {:?} inconsistent with forward", grad_out.shape()),
        ));
    }

    let mut g_in = Tensor::zeros(input.shape());
    let mut g_k = Tensor::zeros(kernel.shape());
    let mut g_b = Tensor::zeros(&[oc]);

    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let gi = g_in.data_mut();
    let gk = g_k.data_mut();
    let gb = g_b.data_mut();

    for ni in 0..n {
        for o in 0..oc {
            let g_plane = &g[((ni * oc) + o) * oh * ow..][..oh * ow];
            gb[o] += g_plane.iter().sum::<f64>();
            for ci in 0..c {
                let x_plane = &x[((ni * c) + ci) * h * w..][..h * w];
                let gi_plane = &mut gi[((ni * c) + ci) * h * w..][..h * w];
                let k_base = ((o * c) + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = k[k_base + ky * kw + kx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let x_row = &x_plane[(oy + ky) * w + kx..][..ow];
                            let g_row = &g_plane[oy * ow..][..ow];
                            for (xv, gv) in x_row.iter().zip(g_row.iter()) {
                                acc += xv * gv;
                            }
                            let gi_row = &mut gi_plane[(oy + ky) * w + kx..][..ow];
                            for (giv, gv) in gi_row.iter_mut().zip(g_row.iter()) {
                                *giv += kv * gv;
                            }
                        }
                        gk[k_base + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: g_in,
        kernel: g_k,
        bias: g_b,
    })
}

/// Argmax bookkeeping for routing pooled gradients back.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    /// Flat input index of the winner for each output cell.
    argmax: Vec<usize>,
}

/// 2×2 max pooling with stride 2. Spatial dimensions must be even; ties pick
/// the first winner in row-major window order.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (n, c, h, w) = shape4(input, "maxpool2x2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2x2",
            format!("spatial dimensions must be even, got {h}x{w}"),
        ));
    }
    let oh = h / 2;
    let ow = w / 2;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];

    let x = input.data();
    let y = out.data_mut();
    for plane in 0..n * c {
        let x_plane = &x[plane * h * w..][..h * w];
        let base_out = plane * oh * ow;
        let base_in = plane * h * w;
        for py in 0..oh {
            for px in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_local = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let iy = py * 2 + dy;
                        let ix = px * 2 + dx;
                        let v = x_plane[iy * w + ix];
                        if v > best {
                            best = v;
                            best_local = iy * w + ix;
                        }
                    }
                }
                y[base_out + py * ow + px] = best;
                argmax[base_out + py * ow + px] = base_in + best_local;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::Usage(
            "maxpool2x2_backward: gradient does not match the recorded forward pass".into(),
        ));
    }
    let mut g_in = Tensor::zeros(&indices.input_shape);
    let gi = g_in.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(indices.argmax.iter()) {
        gi[idx] += g;
    }
    Ok(g_in)
}

/// Affine map y = W·flatten(x) + b with weights [out, in].
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if weights.rank() != 2 {
        return Err(Error::shape(
            "fully_connected",
            format!("weights must be rank 2, got {:?}", weights.shape()),
        ));
    }
    let out_dim = weights.dim(0);
    let in_dim = weights.dim(1);
    if input.len() != in_dim {
        return Err(Error::shape(
            "fully_connected",
            format!("input length {} does not match weight input dimension {in_dim}", input.len()),
        ));
    }
    if bias.rank() != 1 || bias.dim(0) != out_dim {
        return Err(Error::shape(
            "fully_connected",
            format!("bias shape {:?} does not match {out_dim} outputs", bias.shape()),
        ));
    }
    let x = input.data();
    let w = weights.data();
    let mut y = bias.data().to_vec();
    for (j, yv) in y.iter_mut().enumerate() {
        let row = &w[j * in_dim..][..in_dim];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x.iter()) {
            acc += wv * xv;
        }
        *yv += acc;
    }
    Tensor::from_vec(&[out_dim], y)
}

pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<FcGrads> {
    let out_dim = weights.dim(0);
    let in_dim = weights.dim(1);
    if grad_out.len() != out_dim || input.len() != in_dim {
        return Err(Error::shape(
            "fully_connected_backward",
            format!(
                "grad length {} / input length {} vs weights {:?}",
                grad_out.len(),
                input.len(),
                weights.shape()
            ),
        ));
    }
    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();

    let mut g_w = Tensor::zeros(weights.shape());
    let mut g_in = Tensor::zeros(input.shape());
    let gw = g_w.data_mut();
    let gi = g_in.data_mut();
    for j in 0..out_dim {
        let gj = g[j];
        let w_row = &w[j * in_dim..][..in_dim];
        let gw_row = &mut gw[j * in_dim..][..in_dim];
        for i in 0..in_dim {
            gw_row[i] += gj * x[i];
            gi[i] += gj * w_row[i];
        }
    }
    Ok(FcGrads {
        input: g_in,
        weights: g_w,
        bias: Tensor::from_vec(&[out_dim], g.to_vec())?,
    })
}

/// Elementwise max(0, x).
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Passes gradient where x > 0; zero where x < 0 and at the tie x = 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let mut g = grad_out.clone();
    for (gv, xv) in g.data_mut().iter_mut().zip(input.data().iter()) {
        if *xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Kept units and the survivor scale from a dropout forward pass.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    keep: Vec<bool>,
    scale: f64,
}

/// Inverted dropout: each unit is zeroed with probability `rate` in train
/// mode and survivors are scaled by 1/(1−rate); eval mode is the identity.
pub fn dropout(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout",
            format!("rate must lie in [0, 1), got {rate}"),
        ));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut out = input.clone();
    let mut keep = vec![true; input.len()];
    for (v, k) in out.data_mut().iter_mut().zip(keep.iter_mut()) {
        if rng.random::<f64>() < rate {
            *v = 0.0;
            *k = false;
        } else {
            *v *= scale;
        }
    }
    Ok((out, Some(DropoutMask { keep, scale })))
}

pub fn dropout_backward(grad_out: &Tensor, mask: Option<&DropoutMask>) -> Tensor {
    match mask {
        None => grad_out.clone(),
        Some(m) => {
            let mut g = grad_out.clone();
            for (gv, &k) in g.data_mut().iter_mut().zip(m.keep.iter()) {
                *gv = if k { *gv * m.scale } else { 0.0 };
            }
            g
        }
    }
}

fn shape4(t: &Tensor, what: &'static str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::shape(
            what,
            format!("expected rank-4 tensor, got shape {:?}", t.shape()),
        ));
    }
    Ok((t.dim(0), t.dim(1), t.dim(2), t.dim(3)))
}
