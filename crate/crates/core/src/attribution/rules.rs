//! Per-layer backward rules.
//!
//! Every rule maps the gradient at a layer's output to the gradient at its input.
//! The target-selective rules read recorded features (`x_in`, `x_out`) in place of,
//! or in addition to, the layer parameters.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{BatchNorm, LayerKind, Lrn};
use crate::tensor::{self, guarded_div, ConvGeometry, Shape, Tensor};

/// A rule's result together with how many divisions hit the ε guard.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub grad: Tensor,
    pub guarded: usize,
}

/// One-hot gradient over the score layer: 1 at `target`, 0 elsewhere.
pub fn init_output_gradient(num_classes: usize, target: usize) -> Result<Vec<f32>> {
    if target >= num_classes {
        return Err(Error::ClassOutOfRange {
            index: target,
            count: num_classes,
        });
    }
    let mut g = vec![0.0; num_classes];
    g[target] = 1.0;
    Ok(g)
}

fn linear_dims(op: &'static str, x: &Tensor, weight: &Tensor, g_out: &Tensor) -> Result<(usize, usize)> {
    let ws = weight.shape();
    if x.shape().n != 1 || g_out.shape().n != 1 {
        return Err(Error::ShapeMismatch {
            op,
            what: "batch",
            expected: 1,
            actual: x.shape().n.max(g_out.shape().n),
        });
    }
    if x.len() != ws.c {
        return Err(Error::ShapeMismatch {
            op,
            what: "input features",
            expected: ws.c,
            actual: x.len(),
        });
    }
    if g_out.len() != ws.n {
        return Err(Error::ShapeMismatch {
            op,
            what: "output features",
            expected: ws.n,
            actual: g_out.len(),
        });
    }
    Ok((ws.n, ws.c))
}

/// Positive and absolute-negative contributions of column `j`:
/// `(Σ_i x_i w⁺_ij, Σ_i |x_i w⁻_ij|, has_negative_weight)`.
fn contributions(x: &[f32], row: &[f32]) -> (f32, f32, bool) {
    let mut pos = 0.0f32;
    let mut neg = 0.0f32;
    let mut any_neg = false;
    for (&xi, &w) in x.iter().zip(row) {
        if w > 0.0 {
            pos += xi * w;
        } else if w < 0.0 {
            neg += (xi * w).abs();
            any_neg = true;
        }
    }
    (pos, neg, any_neg)
}

/// The unscaled ratio `Σ_i x_i w⁺_ij / Σ_i |x_i w⁻_ij|` for output `j`.
///
/// Exceeds 1 whenever `x ≥ 0` and the bias-free logit `Σ_i x_i w_ij` is positive.
pub fn enhancement_ratio(x: &Tensor, weight: &Tensor, j: usize) -> f32 {
    let inp = weight.shape().c;
    let (pos, neg, _) = contributions(x.data(), &weight.data()[j * inp..(j + 1) * inp]);
    pos / neg
}

/// Enhancement factors `E_j = alpha * pos_j / neg_j` for every output with a nonzero
/// upstream gradient (others are left at 1). Columns without negative weights get 1.
pub fn enhancement_factors(x: &Tensor, weight: &Tensor, g_out: &Tensor, alpha: f32, eps: f32) -> Result<(Vec<f32>, usize)> {
    let (out, inp) = linear_dims("backward_fc_final", x, weight, g_out)?;
    let mut e = vec![1.0f32; out];
    let mut guarded = 0;
    for (j, ej) in e.iter_mut().enumerate() {
        if g_out.data()[j] == 0.0 {
            continue;
        }
        let (pos, neg, any_neg) = contributions(x.data(), &weight.data()[j * inp..(j + 1) * inp]);
        if any_neg {
            let (ratio, hit) = guarded_div(pos, neg, eps);
            guarded += hit as usize;
            *ej = alpha * ratio;
        }
    }
    Ok((e, guarded))
}

/// Target-selective rule for the final fully connected layer:
/// `g_i = Σ_j (w⁺_ij + E_j w⁻_ij) g_j`.
pub fn backward_fc_final(x: &Tensor, weight: &Tensor, g_out: &Tensor, alpha: f32, eps: f32) -> Result<Backward> {
    let (e, guarded) = enhancement_factors(x, weight, g_out, alpha, eps)?;
    let inp = weight.shape().c;
    let mut g = vec![0.0f32; inp];
    for (j, (&gj, &ej)) in g_out.data().iter().zip(&e).enumerate() {
        if gj == 0.0 {
            continue;
        }
        let row = &weight.data()[j * inp..(j + 1) * inp];
        for (gi, &w) in g.iter_mut().zip(row) {
            let eff = if w < 0.0 { ej * w } else { w };
            *gi += eff * gj;
        }
    }
    Ok(Backward {
        grad: Tensor::from_vec(x.shape(), g)?,
        guarded,
    })
}

/// Plain gradient of a fully connected layer: `g = Wᵀ g_out`.
pub fn backward_fc_vanilla(x: &Tensor, weight: &Tensor, g_out: &Tensor) -> Result<Tensor> {
    let (_, inp) = linear_dims("backward_fc_vanilla", x, weight, g_out)?;
    let mut g = vec![0.0f32; inp];
    for (j, &gj) in g_out.data().iter().enumerate() {
        if gj == 0.0 {
            continue;
        }
        let row = &weight.data()[j * inp..(j + 1) * inp];
        for (gi, &w) in g.iter_mut().zip(row) {
            *gi += w * gj;
        }
    }
    Tensor::from_vec(x.shape(), g)
}

fn conv_shapes(op: &'static str, x_in: &Tensor, x_out: &Tensor, g_out: &Tensor, geom: &ConvGeometry) -> Result<()> {
    let si = x_in.shape();
    if si.c != geom.in_channels {
        return Err(Error::ShapeMismatch {
            op,
            what: "input channels",
            expected: geom.in_channels,
            actual: si.c,
        });
    }
    let so = geom.output_shape(si)?;
    tensor::same_shape(op, so, x_out.shape())?;
    tensor::same_shape(op, so, g_out.shape())
}

/// Receptive-field rule for convolutions, evaluated literally:
/// for every output cell `j`, the share `x_j g_j / Σ_{i∈rf(j)} |x_i|` is added to every
/// input cell of its receptive field (across all input channels), and the sum is
/// multiplied by `sign(x_i)`.
///
/// Cost is `O(M·N·H·W·K²)`. Kept as the reference for [`backward_conv_fast`].
pub fn backward_conv_direct(x_in: &Tensor, x_out: &Tensor, g_out: &Tensor, geom: &ConvGeometry, eps: f32) -> Result<Backward> {
    conv_shapes("backward_conv_direct", x_in, x_out, g_out, geom)?;
    let si = x_in.shape();
    let so = x_out.shape();
    let [kh, kw] = geom.kernel;
    let [sh, sw] = geom.stride;
    let [ph, pw] = geom.padding;
    let mut acc = Tensor::zeros(si);
    let mut guarded = 0;
    let mut window: Vec<usize> = Vec::with_capacity(si.c * kh * kw);

    for n in 0..so.n {
        for oc in 0..so.c {
            for oy in 0..so.h {
                for ox in 0..so.w {
                    window.clear();
                    let mut den = 0.0f32;
                    for m in 0..si.c {
                        for ky in 0..kh {
                            let Some(iy) = ConvGeometry::source(oy, ky, sh, ph, si.h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                if let Some(ix) = ConvGeometry::source(ox, kx, sw, pw, si.w) {
                                    let i = x_in.index(n, m, iy, ix);
                                    den += x_in.data()[i].abs();
                                    window.push(i);
                                }
                            }
                        }
                    }
                    let j = x_out.index(n, oc, oy, ox);
                    let (share, hit) = guarded_div(x_out.data()[j] * g_out.data()[j], den, eps);
                    guarded += hit as usize;
                    let dst = acc.data_mut();
                    for &i in &window {
                        dst[i] += share;
                    }
                }
            }
        }
    }
    let grad = tensor::elementwise(&tensor::sign_mask(x_in), &acc, tensor::BinaryOp::Mul)?;
    Ok(Backward { grad, guarded })
}

/// Channel-collapsed form of the receptive-field rule.
///
/// With an all-ones kernel every output channel shares the same denominator, so
/// `D = (Σ_m |X_m|) ∗ u`, `S = (Σ_n X_n^out ⊙ G_n^out) ⊘ D`, and
/// `G_m = (S ∗ uᵀ) ⊙ sign(X_m)`. Only single-channel convolutions remain, making
/// it `N` times cheaper than [`backward_conv_direct`]. The layer weights are never read.
pub fn backward_conv_fast(x_in: &Tensor, x_out: &Tensor, g_out: &Tensor, geom: &ConvGeometry, eps: f32) -> Result<Backward> {
    conv_shapes("backward_conv_fast", x_in, x_out, g_out, geom)?;
    let si = x_in.shape();
    let single = geom.single_channel();
    let ones = tensor::ones_kernel(geom);

    let magnitude = tensor::channel_sum(&tensor::abs(x_in));
    let den = tensor::conv2d(&magnitude, &ones, &[], &single)?;
    let relevance = tensor::channel_sum(&x_out.zip_with(g_out, "backward_conv_fast", |a, b| a * b)?);

    let mut guarded = 0;
    let share = relevance.zip_with(&den, "backward_conv_fast", |r, d| {
        let (q, hit) = guarded_div(r, d, eps);
        guarded += hit as usize;
        q
    });
    let share = share?;
    let scattered = tensor::conv2d_transposed(&share, &ones, &single, (si.h, si.w))?;
    let grad = tensor::elementwise(&tensor::sign_mask(x_in), &scattered, tensor::BinaryOp::Mul)?;
    Ok(Backward { grad, guarded })
}

/// Plain gradient of a convolution (the transposed convolution of `g_out`).
pub fn backward_conv_vanilla(in_shape: Shape, weight: &Tensor, g_out: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    tensor::conv2d_transposed(g_out, weight, geom, (in_shape.h, in_shape.w))
}

/// Ratio rule for normalisation layers: `g_in = (x_out / x_in) ⊙ g_out`, so that
/// `x_in ⊙ g_in = x_out ⊙ g_out` wherever the guard did not fire.
pub fn backward_norm(x_in: &Tensor, x_out: &Tensor, g_out: &Tensor, eps: f32) -> Result<Backward> {
    tensor::same_shape("backward_norm", x_in.shape(), x_out.shape())?;
    tensor::same_shape("backward_norm", x_in.shape(), g_out.shape())?;
    let mut guarded = 0;
    let data = x_in
        .data()
        .iter()
        .zip(x_out.data())
        .zip(g_out.data())
        .map(|((&xi, &xo), &g)| {
            let (q, hit) = guarded_div(xo, xi, eps);
            guarded += hit as usize;
            q * g
        })
        .collect();
    Ok(Backward {
        grad: Tensor::from_vec(x_in.shape(), data)?,
        guarded,
    })
}

/// Ratio rule for average pooling over signed inputs: `x_out ⊙ g_out` is spread back
/// with the pooling adjoint (`1/window` per covered cell) and divided by `x_in`.
pub fn backward_avg_pool_ratio(x_in: &Tensor, x_out: &Tensor, g_out: &Tensor, geom: &tensor::PoolGeometry, eps: f32) -> Result<Backward> {
    let rel = x_out.zip_with(g_out, "backward_avg_pool_ratio", |a, b| a * b)?;
    let spread = tensor::avg_pool2d_adjoint(&rel, geom, x_in.shape())?;
    let mut guarded = 0;
    let grad = spread.zip_with(x_in, "backward_avg_pool_ratio", |p, xi| {
        let (q, hit) = guarded_div(p, xi, eps);
        guarded += hit as usize;
        q
    })?;
    Ok(Backward { grad, guarded })
}

pub fn backward_batch_norm_vanilla(bn: &BatchNorm, g_out: &Tensor) -> Result<Tensor> {
    let s = g_out.shape();
    if s.c != bn.gamma.len() {
        return Err(Error::ShapeMismatch {
            op: "backward_batch_norm",
            what: "channels",
            expected: bn.gamma.len(),
            actual: s.c,
        });
    }
    let mut out = g_out.clone();
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let k = bn.gamma[c] / libm::sqrtf(bn.var[c] + bn.eps);
            let start = (n * s.c + c) * plane;
            out.data_mut()[start..start + plane].iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(out)
}

/// Exact gradient of local response normalisation.
pub fn backward_lrn_vanilla(x_in: &Tensor, lrn: &Lrn, g_out: &Tensor) -> Result<Tensor> {
    tensor::same_shape("backward_lrn", x_in.shape(), g_out.shape())?;
    let s = x_in.shape();
    let den = crate::forward::lrn_denominator(x_in, lrn);
    let plane = s.plane();
    let coeff = 2.0 * lrn.alpha * lrn.beta / lrn.size as f32;
    // t_c = g_c x_c s_c^(-beta-1)
    let t: Vec<f32> = (0..s.numel())
        .map(|i| g_out.data()[i] * x_in.data()[i] * libm::powf(den.data()[i], -lrn.beta - 1.0))
        .collect();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for d in 0..s.c {
            // channels c whose window contains d
            let lo = d.saturating_sub((lrn.size - 1) / 2);
            let hi = (d + lrn.size / 2).min(s.c - 1);
            for p in 0..plane {
                let i = (n * s.c + d) * plane + p;
                let mut cross = 0.0f32;
                for c in lo..=hi {
                    cross += t[(n * s.c + c) * plane + p];
                }
                out.data_mut()[i] = g_out.data()[i] * libm::powf(den.data()[i], -lrn.beta) - coeff * x_in.data()[i] * cross;
            }
        }
    }
    Ok(out)
}

/// ReLU gradient; `guided` also drops negative upstream gradients.
pub fn backward_relu(x_in: &Tensor, g_out: &Tensor, guided: bool) -> Result<Tensor> {
    x_in.zip_with(g_out, "backward_relu", |x, g| {
        if x > 0.0 && (!guided || g > 0.0) {
            g
        } else {
            0.0
        }
    })
}

/// Standard gradients of the layers that keep their ordinary backward pass.
/// Returns one gradient per input.
pub fn backward_passthrough(kind: &LayerKind, ins: &[&Tensor], g_out: &Tensor) -> Result<Vec<Tensor>> {
    let x = ins[0];
    let one = |t: Result<Tensor>| t.map(|t| vec![t]);
    match kind {
        LayerKind::Relu => one(backward_relu(x, g_out, false)),
        LayerKind::MaxPool(g) => one(tensor::max_pool2d_backward(x, g_out, g)),
        LayerKind::AvgPool(g) => one(tensor::avg_pool2d_adjoint(g_out, g, x.shape())),
        LayerKind::AdaptiveAvgPool(_) => one(tensor::adaptive_avg_pool2d_adjoint(g_out, x.shape())),
        LayerKind::GlobalAvgPool => one(tensor::global_avg_pool_adjoint(g_out, x.shape())),
        LayerKind::Flatten => one(g_out.reshape(x.shape())),
        LayerKind::Add => {
            for t in ins {
                tensor::same_shape("backward_add", t.shape(), g_out.shape())?;
            }
            Ok(ins.iter().map(|_| g_out.clone()).collect())
        }
        LayerKind::Concat => split_channels(ins, g_out),
        other => Err(Error::InvalidArgument(format!(
            "{} has no pass-through gradient",
            other.tag()
        ))),
    }
}

fn split_channels(ins: &[&Tensor], g_out: &Tensor) -> Result<Vec<Tensor>> {
    let gs = g_out.shape();
    let total: usize = ins.iter().map(|t| t.shape().c).sum();
    if total != gs.c {
        return Err(Error::ShapeMismatch {
            op: "backward_concat",
            what: "channels",
            expected: gs.c,
            actual: total,
        });
    }
    let plane = gs.plane();
    let mut parts: Vec<Vec<f32>> = ins.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for n in 0..gs.n {
        let mut c0 = 0;
        for (k, t) in ins.iter().enumerate() {
            let c = t.shape().c;
            let start = (n * gs.c + c0) * plane;
            parts[k].extend_from_slice(&g_out.data()[start..start + c * plane]);
            c0 += c;
        }
    }
    ins.iter()
        .zip(parts)
        .map(|(t, d)| Tensor::from_vec(t.shape(), d))
        .collect()
}
