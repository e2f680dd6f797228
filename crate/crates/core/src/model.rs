//! Network graph data model.
//!
//! A [`ModelGraph`] is a topologically ordered list of [`LayerSpec`]s. A layer
//! with no inputs reads the (preprocessed) network input; the last layer must be
//! the Linear layer marked `final`, whose output is the pre-softmax score vector.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, PoolGeometry, Shape, Tensor};

/// Coarse architecture family. Picks the default scale coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    VggLike,
    ResnetLike,
    #[default]
    Other,
}

impl Family {
    /// 0.8 for VGG-like nets, 0.9 for ResNet-like nets, 0.8 otherwise.
    pub fn default_alpha(self) -> f32 {
        match self {
            Family::ResnetLike => 0.9,
            Family::VggLike | Family::Other => 0.8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::VggLike => "vgg-like",
            Family::ResnetLike => "resnet-like",
            Family::Other => "other",
        }
    }
}

/// Per-channel input normalisation applied inside the forward pass:
/// `(raw - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Preprocess {
    pub fn identity(channels: usize) -> Self {
        Preprocess {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Batch normalisation in inference form.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize, eps: f32) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    /// Per-channel `(scale, shift)` so that `y = x * scale + shift`.
    pub fn affine(&self) -> Vec<(f32, f32)> {
        (0..self.gamma.len())
            .map(|c| {
                let inv = 1.0 / libm::sqrtf(self.var[c] + self.eps);
                let scale = self.gamma[c] * inv;
                (scale, self.beta[c] - self.mean[c] * scale)
            })
            .collect()
    }
}

/// Cross-channel local response normalisation:
/// `y_c = x_c / (k + alpha/size * Σ_{c' ∈ window(c)} x_{c'}²)^beta`, with the window
/// spanning `c - size/2 ..= c + (size-1)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lrn {
    pub size: usize,
    pub alpha: f32,
    pub beta: f32,
    pub k: f32,
}

impl Lrn {
    pub fn window(&self, c: usize, channels: usize) -> (usize, usize) {
        let lo = c.saturating_sub(self.size / 2);
        let hi = (c + (self.size - 1) / 2).min(channels - 1);
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        geometry: ConvGeometry,
        /// `out x in x kh x kw`
        weight: Tensor,
        bias: Vec<f32>,
    },
    Linear {
        /// `out x in x 1 x 1`
        weight: Tensor,
        bias: Vec<f32>,
        is_final: bool,
    },
    Relu,
    MaxPool(PoolGeometry),
    AvgPool(PoolGeometry),
    AdaptiveAvgPool([usize; 2]),
    BatchNorm(BatchNorm),
    LocalResponseNorm(Lrn),
    Flatten,
    Add,
    Concat,
    GlobalAvgPool,
}

impl LayerKind {
    /// Tag used in the model file and in messages.
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool(_) => "max_pool",
            LayerKind::AvgPool(_) => "avg_pool",
            LayerKind::AdaptiveAvgPool(_) => "adaptive_avg_pool",
            LayerKind::BatchNorm(_) => "batch_norm",
            LayerKind::LocalResponseNorm(_) => "local_response_norm",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub const TAGS: [&'static str; 12] = [
        "conv2d",
        "linear",
        "relu",
        "max_pool",
        "avg_pool",
        "adaptive_avg_pool",
        "batch_norm",
        "local_response_norm",
        "flatten",
        "add",
        "concat",
        "global_avg_pool",
    ];

    pub fn is_multi_input(&self) -> bool {
        matches!(self, LayerKind::Add | LayerKind::Concat)
    }

    pub fn has_parameters(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::Linear { .. } | LayerKind::BatchNorm(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: u32,
    /// Source layer ids; empty means the network input.
    pub inputs: Vec<u32>,
    pub kind: LayerKind,
}

/// One failed invariant, optionally tied to a layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub layer: Option<u32>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(id) => write!(f, "layer {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub family: Family,
    pub input_shape: Shape,
    pub num_classes: usize,
    pub preprocess: Preprocess,
    pub layers: Vec<LayerSpec>,
}

impl ModelGraph {
    /// Builds a graph and rejects it unless [`ModelGraph::validate`] is clean.
    pub fn new(
        name: impl Into<String>,
        family: Family,
        input_shape: Shape,
        num_classes: usize,
        preprocess: Preprocess,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let g = ModelGraph {
            name: name.into(),
            family,
            input_shape,
            num_classes,
            preprocess,
            layers,
        };
        g.check()?;
        Ok(g)
    }

    /// Errors with every violation joined into one message.
    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = v.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidModel(msgs.join("; ")))
        }
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn final_linear(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Linear { is_final: true, .. }))
    }

    /// Indices of the layers feeding layer `idx`; `None` stands for the network input.
    pub fn sources(&self, idx: usize) -> Vec<Option<usize>> {
        let l = &self.layers[idx];
        if l.inputs.is_empty() {
            vec![None]
        } else {
            l.inputs.iter().map(|&id| self.position(id)).collect()
        }
    }

    /// Output shape of every layer, in layer order.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut ins = Vec::new();
            for src in self.sources(idx) {
                match src {
                    None => ins.push(self.input_shape),
                    Some(s) if s < idx => ins.push(shapes[s]),
                    _ => {
                        return Err(Error::InvalidModel(format!(
                            "layer {} reads a layer that is not defined before it",
                            layer.id
                        )))
                    }
                }
            }
            let out = layer_output_shape(&layer.kind, &ins).map_err(|e| e.at_layer(layer.id))?;
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Every violated invariant; empty iff the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |layer: Option<u32>, message: String| out.push(Violation { layer, message });

        if self.layers.is_empty() {
            push(None, "graph has no layers".into());
            return out;
        }
        let s = self.input_shape;
        if s.n != 1 {
            push(None, format!("input batch extent must be 1, got {}", s.n));
        }
        if s.numel() == 0 {
            push(None, format!("input shape {s} is empty"));
        }
        if self.num_classes == 0 {
            push(None, "class count must be positive".into());
        }
        let pp = &self.preprocess;
        if pp.mean.len() != s.c || pp.std.len() != s.c {
            push(
                None,
                format!(
                    "preprocessing has {} means and {} stds for {} input channels",
                    pp.mean.len(),
                    pp.std.len(),
                    s.c
                ),
            );
        }
        if pp.std.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            push(None, "preprocessing std values must be positive".into());
        }

        let mut seen = BTreeSet::new();
        let mut consumed = BTreeSet::new();
        let mut structural_ok = true;
        for layer in &self.layers {
            if !seen.insert(layer.id) {
                push(Some(layer.id), "duplicate layer id".into());
                structural_ok = false;
            }
            for src in &layer.inputs {
                if !seen.contains(src) || *src == layer.id {
                    push(
                        Some(layer.id),
                        format!("input {src} is not a layer defined earlier"),
                    );
                    structural_ok = false;
                }
                consumed.insert(*src);
            }
            let arity = layer.inputs.len();
            if layer.kind.is_multi_input() {
                if arity < 2 {
                    push(
                        Some(layer.id),
                        format!("{} needs at least two inputs, got {arity}", layer.kind.tag()),
                    );
                    structural_ok = false;
                }
            } else if arity > 1 {
                push(
                    Some(layer.id),
                    format!("{} takes one input, got {arity}", layer.kind.tag()),
                );
                structural_ok = false;
            }
            check_parameters(layer, &mut push);
        }

        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            if !consumed.contains(&layer.id) {
                push(
                    Some(layer.id),
                    "output is never consumed; the graph must have a single output".into(),
                );
            }
        }

        let finals: Vec<&LayerSpec> = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Linear { is_final: true, .. }))
            .collect();
        match finals.len() {
            0 => push(None, "no Linear layer is marked final".into()),
            1 => {
                if finals[0].id != self.layers[last].id {
                    push(
                        Some(finals[0].id),
                        "the final Linear layer must be the last layer".into(),
                    );
                }
                if let LayerKind::Linear { weight, .. } = &finals[0].kind {
                    if weight.shape().n != self.num_classes {
                        push(
                            Some(finals[0].id),
                            format!(
                                "final Linear has {} outputs for {} classes",
                                weight.shape().n,
                                self.num_classes
                            ),
                        );
                    }
                }
            }
            n => {
                for f in &finals {
                    push(
                        Some(f.id),
                        format!("{n} Linear layers are marked final; exactly one is allowed"),
                    );
                }
            }
        }

        if structural_ok {
            if let Err(e) = self.infer_shapes() {
                match e {
                    Error::Layer { layer, source } => push(Some(layer), source.to_string()),
                    other => push(None, other.to_string()),
                }
            }
        }
        out
    }
}

fn check_parameters(layer: &LayerSpec, push: &mut impl FnMut(Option<u32>, String)) {
    let id = Some(layer.id);
    match &layer.kind {
        LayerKind::Conv2d {
            geometry,
            weight,
            bias,
        } => {
            if weight.shape() != geometry.weight_shape() {
                push(
                    id,
                    format!(
                        "conv weight shape {} does not match geometry {}",
                        weight.shape(),
                        geometry.weight_shape()
                    ),
                );
            }
            if !bias.is_empty() && bias.len() != geometry.out_channels {
                push(
                    id,
                    format!("conv bias has {} values for {} channels", bias.len(), geometry.out_channels),
                );
            }
        }
        LayerKind::Linear { weight, bias, .. } => {
            let s = weight.shape();
            if s.h != 1 || s.w != 1 {
                push(id, format!("linear weight must be out x in, got {s}"));
            }
            if !bias.is_empty() && bias.len() != s.n {
                push(id, format!("linear bias has {} values for {} outputs", bias.len(), s.n));
            }
        }
        LayerKind::BatchNorm(bn) => {
            let c = bn.gamma.len();
            if bn.beta.len() != c || bn.mean.len() != c || bn.var.len() != c {
                push(id, "batch norm parameter vectors differ in length".into());
            }
            if let Some(pos) = bn.var.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                push(
                    id,
                    format!("batch norm variance must be strictly positive (channel {pos} is {})", bn.var[pos]),
                );
            }
            if !(bn.eps >= 0.0) {
                push(id, "batch norm eps must be non-negative".into());
            }
        }
        LayerKind::LocalResponseNorm(lrn) => {
            if lrn.size == 0 {
                push(id, "LRN size must be positive".into());
            }
        }
        LayerKind::MaxPool(g) | LayerKind::AvgPool(g) if g.kernel.contains(&0) || g.stride.contains(&0) => {
            push(id, "pool kernel and stride must be positive".into());
        }
        _ => {}
    }
}

fn mismatch(what: &'static str, expected: usize, actual: usize) -> Error {
    Error::ShapeMismatch {
        op: "shape inference",
        what,
        expected,
        actual,
    }
}

fn layer_output_shape(kind: &LayerKind, ins: &[Shape]) -> Result<Shape> {
    let first = ins[0];
    match kind {
        LayerKind::Conv2d { geometry, .. } => {
            if first.c != geometry.in_channels {
                return Err(mismatch("input channels", geometry.in_channels, first.c));
            }
            geometry.output_shape(first)
        }
        LayerKind::Linear { weight, .. } => {
            let s = weight.shape();
            if first.item() != s.c {
                return Err(mismatch("input features", s.c, first.item()));
            }
            Ok(Shape::new(first.n, s.n, 1, 1))
        }
        LayerKind::Relu => Ok(first),
        LayerKind::BatchNorm(bn) => {
            if first.c != bn.gamma.len() {
                return Err(mismatch("batch norm channels", bn.gamma.len(), first.c));
            }
            Ok(first)
        }
        LayerKind::LocalResponseNorm(_) => Ok(first),
        LayerKind::MaxPool(g) | LayerKind::AvgPool(g) => g.output_shape(first),
        LayerKind::AdaptiveAvgPool(hw) => {
            if hw[0] == 0 || hw[1] == 0 {
                return Err(Error::Geometry(format!("adaptive pool target {hw:?} must be positive")));
            }
            Ok(Shape::new(first.n, first.c, hw[0], hw[1]))
        }
        LayerKind::Flatten => Ok(Shape::new(first.n, first.item(), 1, 1)),
        LayerKind::GlobalAvgPool => Ok(Shape::new(first.n, first.c, 1, 1)),
        LayerKind::Add => {
            for s in &ins[1..] {
                crate::tensor::same_shape("add", first, *s)?;
            }
            Ok(first)
        }
        LayerKind::Concat => {
            let mut c = 0;
            for s in ins {
                crate::tensor::same_shape("concat", first.with_channels(1), s.with_channels(1))?;
                c += s.c;
            }
            Ok(first.with_channels(c))
        }
    }
}

/// Appends layers with sequential ids, wiring each to the previous one by default.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    name: String,
    family: Family,
    input_shape: Shape,
    num_classes: usize,
    preprocess: Preprocess,
    layers: Vec<LayerSpec>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input_shape: Shape, num_classes: usize) -> Self {
        GraphBuilder {
            name: name.into(),
            family: Family::Other,
            input_shape,
            num_classes,
            preprocess: Preprocess::identity(input_shape.c),
            layers: Vec::new(),
        }
    }

    pub fn family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn preprocess(mut self, preprocess: Preprocess) -> Self {
        self.preprocess = preprocess;
        self
    }

    /// Id of the most recently added layer.
    pub fn last_id(&self) -> Option<u32> {
        self.layers.last().map(|l| l.id)
    }

    /// Adds a layer reading from the previous layer (or the input when first).
    pub fn push(&mut self, kind: LayerKind) -> u32 {
        let inputs = self.last_id().into_iter().collect();
        self.push_from(inputs, kind)
    }

    pub fn push_from(&mut self, inputs: Vec<u32>, kind: LayerKind) -> u32 {
        let id = self.layers.len() as u32;
        self.layers.push(LayerSpec { id, inputs, kind });
        id
    }

    pub fn layer(mut self, kind: LayerKind) -> Self {
        self.push(kind);
        self
    }

    pub fn build(self) -> Result<ModelGraph> {
        ModelGraph::new(
            self.name,
            self.family,
            self.input_shape,
            self.num_classes,
            self.preprocess,
            self.layers,
        )
    }

    /// Like [`GraphBuilder::build`] but skips validation.
    pub fn build_unchecked(self) -> ModelGraph {
        ModelGraph {
            name: self.name,
            family: self.family,
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            preprocess: self.preprocess,
            layers: self.layers,
        }
    }
}
