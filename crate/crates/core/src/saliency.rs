//! Saliency maps: assembly from input gradients and post-processing.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attribution::{run_attribution, AttributionRequest, AttributionState, RuleSet};
use crate::error::{Error, Result};
use crate::forward::{run_forward, ActivationTrace};
use crate::model::ModelGraph;
use crate::tensor::Tensor;
use crate::tensor::{self, BinaryOp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub target: usize,
    pub alpha: f32,
    pub rule_set: RuleSet,
    pub model: String,
}

/// Signed per-pixel map at input resolution, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    pub meta: MapMeta,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, meta: MapMeta) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "saliency map",
                what: "value count",
                expected: height * width,
                actual: values.len(),
            });
        }
        Ok(SaliencyMap {
            height,
            width,
            values,
            meta,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> SaliencyMap {
        SaliencyMap {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

/// `Σ_channels G_input ⊙ input`, where `input` is the preprocessed image the
/// network actually read.
pub fn assemble(state: &AttributionState, trace: &ActivationTrace, req: &AttributionRequest, model: &str) -> Result<SaliencyMap> {
    let grad = state
        .input_grad
        .as_ref()
        .ok_or(Error::MissingInputGradient(state.stopped_at.unwrap_or(0)))?;
    let prod = tensor::elementwise(grad, &trace.input, BinaryOp::Mul)?;
    let summed = tensor::channel_sum(&prod);
    let s = summed.shape();
    SaliencyMap::new(
        s.h,
        s.w,
        summed.into_data(),
        MapMeta {
            target: req.target,
            alpha: req.alpha,
            rule_set: req.rule_set,
            model: model.into(),
        },
    )
}

/// Same construction at an intermediate layer: `Σ_channels G ⊙ X` over the input
/// features of layer `id`, at that layer's resolution. Useful with a stop layer.
pub fn assemble_at(
    graph: &ModelGraph,
    state: &AttributionState,
    trace: &ActivationTrace,
    req: &AttributionRequest,
    id: u32,
) -> Result<SaliencyMap> {
    let idx = graph
        .position(id)
        .ok_or_else(|| Error::InvalidArgument(format!("no layer with id {id}")))?;
    let grad = state.input_gradient(graph, id).ok_or(Error::MissingInputGradient(id))?;
    let x = trace.layer_inputs(graph, idx)[0];
    let summed = tensor::channel_sum(&tensor::elementwise(grad, x, BinaryOp::Mul)?);
    let s = summed.shape();
    SaliencyMap::new(
        s.h,
        s.w,
        summed.into_data(),
        MapMeta {
            target: req.target,
            alpha: req.alpha,
            rule_set: req.rule_set,
            model: graph.name.clone(),
        },
    )
}

/// Forward pass, attribution and assembly in one call.
pub fn explain(graph: &ModelGraph, image: &Tensor, req: &AttributionRequest) -> Result<(ActivationTrace, AttributionState, SaliencyMap)> {
    let trace = run_forward(graph, image)?;
    let state = run_attribution(graph, &trace, req)?;
    let map = assemble(&state, &trace, req, &graph.name)?;
    Ok((trace, state, map))
}

/// `max(v, 0)` per pixel.
pub fn truncate_negatives(m: &SaliencyMap) -> SaliencyMap {
    m.map_values(|v| v.max(0.0))
}

/// Inclusive pixel box: columns `x0..=x1`, rows `y0..=y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y0..=self.y1).contains(&row) && (self.x0..=self.x1).contains(&col)
    }

    /// Box grown by `margin` pixels on every side (clamped at zero).
    pub fn dilate(&self, margin: usize) -> BBox {
        BBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: self.x1 + margin,
            y1: self.y1 + margin,
        }
    }

    pub fn is_within(&self, height: usize, width: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 < width && self.y1 < height
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        let inter = if ix0 <= ix1 && iy0 <= iy1 {
            (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
        } else {
            0
        };
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

/// Tight box around every pixel whose truncated value reaches
/// `threshold_fraction * max`.
pub fn binarize_bbox(m: &SaliencyMap, threshold_fraction: f32) -> Result<BBox> {
    if !(threshold_fraction > 0.0 && threshold_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold fraction must lie in (0, 1), got {threshold_fraction}"
        )));
    }
    let max = m.max();
    if !(max > 0.0) {
        return Err(Error::EmptyMap);
    }
    let thr = threshold_fraction * max;
    let mut b: Option<BBox> = None;
    for row in 0..m.height {
        for col in 0..m.width {
            if m.at(row, col) >= thr {
                b = Some(match b {
                    None => BBox::new(col, row, col, row),
                    Some(b) => BBox::new(b.x0.min(col), b.y0.min(row), b.x1.max(col), b.y1.max(row)),
                });
            }
        }
    }
    b.ok_or(Error::EmptyMap)
}

/// `(row, col)` of the maximum; the first in row-major order wins ties.
pub fn argmax_point(m: &SaliencyMap) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in m.values.iter().enumerate() {
        if v > m.values[best] {
            best = i;
        }
    }
    (best / m.width, best % m.width)
}

/// Rendering of a map to 8-bit pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportMode {
    /// Min-max normalised graymap; a constant map renders mid-gray.
    Grayscale,
    /// Pixmap with positives in red and negatives in blue, scaled by the largest magnitude.
    SignedDiverging,
}

fn to_byte(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Binary PGM (`P5`) or PPM (`P6`) bytes for `m`.
pub fn encode_pnm(m: &SaliencyMap, mode: ExportMode) -> Vec<u8> {
    let mut out = Vec::new();
    let (magic, channels) = match mode {
        ExportMode::Grayscale => ("P5", 1),
        ExportMode::SignedDiverging => ("P6", 3),
    };
    out.extend_from_slice(format!("{magic}\n{} {}\n255\n", m.width, m.height).as_bytes());
    out.reserve(m.values.len() * channels);
    match mode {
        ExportMode::Grayscale => {
            let (lo, hi) = (m.min(), m.max());
            let span = hi - lo;
            for &v in &m.values {
                out.push(if span > 0.0 { to_byte((v - lo) / span) } else { 128 });
            }
        }
        ExportMode::SignedDiverging => {
            let mag = m.values.iter().fold(0.0f32, |a, v| a.max(v.abs()));
            for &v in &m.values {
                let (r, b) = if mag > 0.0 {
                    (to_byte(v.max(0.0) / mag), to_byte((-v).max(0.0) / mag))
                } else {
                    (0, 0)
                };
                out.extend_from_slice(&[r, 0, b]);
            }
        }
    }
    out
}
