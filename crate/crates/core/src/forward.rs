//! Forward execution with full activation capture.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{BatchNorm, LayerKind, Lrn, ModelGraph};
use crate::tensor::{self, Shape, Tensor};

/// Every layer's output for one input, plus the raw and preprocessed input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    /// The raw image as given.
    pub image: Tensor,
    /// The image after per-channel preprocessing; this is what the first layers read.
    pub input: Tensor,
    /// Output features per layer, indexed like `ModelGraph::layers`.
    pub outputs: Vec<Tensor>,
    /// Pre-softmax class scores.
    pub scores: Vec<f32>,
}

impl ActivationTrace {
    /// Input features of layer `idx`, one per source.
    pub fn layer_inputs<'a>(&'a self, graph: &ModelGraph, idx: usize) -> Vec<&'a Tensor> {
        graph
            .sources(idx)
            .into_iter()
            .map(|s| match s {
                Some(i) => &self.outputs[i],
                None => &self.input,
            })
            .collect()
    }

    pub fn output(&self, idx: usize) -> &Tensor {
        &self.outputs[idx]
    }
}

/// Applies the graph's preprocessing to a raw image.
pub fn preprocess(graph: &ModelGraph, image: &Tensor) -> Result<Tensor> {
    tensor::same_shape("run_forward", graph.input_shape, image.shape())?;
    let s = image.shape();
    let mut out = image.clone();
    let plane = s.plane();
    for c in 0..s.c {
        let (m, sd) = (graph.preprocess.mean[c], graph.preprocess.std[c]);
        for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
            *v = (*v - m) / sd;
        }
    }
    Ok(out)
}

/// Runs the graph on a raw image (batch extent 1).
pub fn run_forward(graph: &ModelGraph, image: &Tensor) -> Result<ActivationTrace> {
    let input = preprocess(graph, image)?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(graph.layers.len());
    for (idx, layer) in graph.layers.iter().enumerate() {
        let ins: Vec<&Tensor> = graph
            .sources(idx)
            .into_iter()
            .map(|s| match s {
                Some(i) if i < outputs.len() => Ok(&outputs[i]),
                None => Ok(&input),
                _ => Err(Error::InvalidModel(alloc::format!(
                    "layer {} reads a layer not yet computed",
                    layer.id
                ))),
            })
            .collect::<Result<_>>()
            .map_err(|e| e.at_layer(layer.id))?;
        let out = apply_layer(&layer.kind, &ins).map_err(|e| e.at_layer(layer.id))?;
        outputs.push(out);
    }
    let scores = outputs
        .last()
        .map(|t| t.data().to_vec())
        .ok_or_else(|| Error::InvalidModel("graph has no layers".into()))?;
    Ok(ActivationTrace {
        image: image.clone(),
        input,
        outputs,
        scores,
    })
}

/// Forward rule of a single layer.
pub fn apply_layer(kind: &LayerKind, ins: &[&Tensor]) -> Result<Tensor> {
    let x = ins[0];
    match kind {
        LayerKind::Conv2d {
            geometry,
            weight,
            bias,
        } => tensor::conv2d(x, weight, bias, geometry),
        LayerKind::Linear { weight, bias, .. } => linear(x, weight, bias),
        LayerKind::Relu => Ok(x.map(|v| v.max(0.0))),
        LayerKind::MaxPool(g) => tensor::max_pool2d(x, g),
        LayerKind::AvgPool(g) => tensor::avg_pool2d(x, g),
        LayerKind::AdaptiveAvgPool(hw) => tensor::adaptive_avg_pool2d(x, *hw),
        LayerKind::BatchNorm(bn) => batch_norm(x, bn),
        LayerKind::LocalResponseNorm(lrn) => local_response_norm(x, lrn),
        LayerKind::Flatten => x.reshape(Shape::new(x.shape().n, x.shape().item(), 1, 1)),
        LayerKind::GlobalAvgPool => Ok(tensor::global_avg_pool(x)),
        LayerKind::Add => {
            let mut acc = x.clone();
            for other in &ins[1..] {
                acc = acc.zip_with(other, "add", |a, b| a + b)?;
            }
            Ok(acc)
        }
        LayerKind::Concat => concat(ins),
    }
}

fn linear(x: &Tensor, weight: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let ws = weight.shape();
    let xs = x.shape();
    if xs.item() != ws.c {
        return Err(Error::ShapeMismatch {
            op: "linear",
            what: "input features",
            expected: ws.c,
            actual: xs.item(),
        });
    }
    let mut out = Vec::with_capacity(xs.n * ws.n);
    for n in 0..xs.n {
        let xi = &x.data()[n * ws.c..(n + 1) * ws.c];
        for j in 0..ws.n {
            let row = &weight.data()[j * ws.c..(j + 1) * ws.c];
            let dot: f32 = row.iter().zip(xi).map(|(w, v)| w * v).sum();
            out.push(dot + bias.get(j).copied().unwrap_or(0.0));
        }
    }
    Tensor::from_vec(Shape::new(xs.n, ws.n, 1, 1), out)
}

fn batch_norm(x: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    let s = x.shape();
    if s.c != bn.gamma.len() {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            what: "channels",
            expected: bn.gamma.len(),
            actual: s.c,
        });
    }
    let mut out = x.clone();
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let inv = 1.0 / libm::sqrtf(bn.var[c] + bn.eps);
            let start = (n * s.c + c) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = (*v - bn.mean[c]) * inv * bn.gamma[c] + bn.beta[c];
            }
        }
    }
    Ok(out)
}

/// `k + alpha/size * Σ window x²` per element.
pub(crate) fn lrn_denominator(x: &Tensor, lrn: &Lrn) -> Tensor {
    let s = x.shape();
    let mut den = Tensor::zeros(s);
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let (lo, hi) = lrn.window(c, s.c);
            for p in 0..plane {
                let mut acc = 0.0f32;
                for cc in lo..=hi {
                    let v = x.data()[(n * s.c + cc) * plane + p];
                    acc += v * v;
                }
                den.data_mut()[(n * s.c + c) * plane + p] = lrn.k + lrn.alpha / lrn.size as f32 * acc;
            }
        }
    }
    den
}

fn local_response_norm(x: &Tensor, lrn: &Lrn) -> Result<Tensor> {
    let den = lrn_denominator(x, lrn);
    x.zip_with(&den, "local_response_norm", |v, d| v / libm::powf(d, lrn.beta))
}

fn concat(ins: &[&Tensor]) -> Result<Tensor> {
    let first = ins[0].shape();
    let c: usize = ins.iter().map(|t| t.shape().c).sum();
    let out_shape = first.with_channels(c);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in ins {
            tensor::same_shape("concat", first.with_channels(t.shape().c), t.shape())?;
            let item = t.shape().item();
            data.extend_from_slice(&t.data()[n * item..(n + 1) * item]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn top_k(scores: &[f32], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "k = {k} exceeds the class count {}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps lower indices first among equal scores
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Softmax probabilities computed in `f64`.
pub fn softmax(scores: &[f32]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = scores.iter().map(|&s| libm::exp(s as f64 - m)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
