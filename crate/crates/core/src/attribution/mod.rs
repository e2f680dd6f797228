//! Target-selective gradient propagation.
//!
//! [`run_attribution`] seeds a one-hot gradient at the target class score and walks
//! the graph top-down, applying one backward rule per layer. Which rule each layer
//! gets depends on the [`RuleSet`]:
//!
//! | layer               | `tsgb`             | `tsgb_fc_only`  | `tsgb_conv_only`   | `vanilla` / `guided` |
//! |---------------------|--------------------|-----------------|--------------------|----------------------|
//! | final Linear        | enhanced negatives | enhanced        | plain              | plain                |
//! | other Linear        | plain              | plain           | plain              | plain                |
//! | Conv2d              | receptive-field    | plain           | receptive-field    | plain                |
//! | BatchNorm / LRN     | ratio              | plain           | ratio              | plain                |
//! | AvgPool, signed in  | ratio              | plain           | ratio              | plain                |
//!
//! Everything else (ReLU, pooling, Add, Concat, Flatten) uses its ordinary
//! gradient; `guided` additionally drops negative gradients at every ReLU.

mod rules;

pub use rules::{
    backward_avg_pool_ratio, backward_batch_norm_vanilla, backward_conv_direct, backward_conv_fast,
    backward_conv_vanilla, backward_fc_final, backward_fc_vanilla, backward_lrn_vanilla, backward_norm,
    backward_passthrough, backward_relu, enhancement_factors, enhancement_ratio, init_output_gradient,
    Backward,
};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ActivationTrace;
use crate::model::{LayerKind, ModelGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSet {
    Tsgb,
    Vanilla,
    Guided,
    TsgbFcOnly,
    TsgbConvOnly,
}

impl RuleSet {
    pub const ALL: [RuleSet; 5] = [
        RuleSet::Tsgb,
        RuleSet::Vanilla,
        RuleSet::Guided,
        RuleSet::TsgbFcOnly,
        RuleSet::TsgbConvOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleSet::Tsgb => "tsgb",
            RuleSet::Vanilla => "vanilla",
            RuleSet::Guided => "guided",
            RuleSet::TsgbFcOnly => "tsgb_fc_only",
            RuleSet::TsgbConvOnly => "tsgb_conv_only",
        }
    }

    /// Whether the final Linear layer uses the enhanced-negative rule.
    pub fn target_selection(self) -> bool {
        matches!(self, RuleSet::Tsgb | RuleSet::TsgbFcOnly)
    }

    /// Whether conv, normalisation and signed average-pool layers use the
    /// feature-ratio rules.
    pub fn fine_grained(self) -> bool {
        matches!(self, RuleSet::Tsgb | RuleSet::TsgbConvOnly)
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RuleSet::ALL
            .into_iter()
            .find(|r| r.as_str() == s || r.as_str().replace('_', "-") == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown rule set `{s}` (expected tsgb, vanilla, guided, tsgb_fc_only or tsgb_conv_only)"
                ))
            })
    }
}

/// How average pooling is treated under the fine-grained rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvgPoolPolicy {
    /// Ratio rule iff the recorded input has a negative value.
    #[default]
    Auto,
    Ratio,
    Passthrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionRequest {
    pub target: usize,
    pub alpha: f32,
    pub rule_set: RuleSet,
    /// Stop after back-propagating through this layer.
    pub stop_layer: Option<u32>,
    pub avg_pool_policy: AvgPoolPolicy,
    pub eps: f32,
}

impl AttributionRequest {
    pub fn new(target: usize, alpha: f32, rule_set: RuleSet) -> Self {
        AttributionRequest {
            target,
            alpha,
            rule_set,
            stop_layer: None,
            avg_pool_policy: AvgPoolPolicy::Auto,
            eps: crate::DEFAULT_EPS,
        }
    }

    pub fn with_stop_layer(mut self, id: u32) -> Self {
        self.stop_layer = Some(id);
        self
    }

    pub fn with_avg_pool_policy(mut self, p: AvgPoolPolicy) -> Self {
        self.avg_pool_policy = p;
        self
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.target >= num_classes {
            return Err(Error::ClassOutOfRange {
                index: self.target,
                count: num_classes,
            });
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be a positive number, got {}",
                self.alpha
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// The backward rule chosen for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    FcEnhanced,
    FcPlain,
    ConvReceptiveField,
    ConvPlain,
    NormRatio,
    BatchNormPlain,
    LrnPlain,
    ReluMask,
    ReluGuided,
    MaxPoolRoute,
    AvgPoolSpread,
    AvgPoolRatio,
    /// Resolved to `AvgPoolRatio` or `AvgPoolSpread` from the recorded input.
    AvgPoolAuto,
    AdaptivePoolSpread,
    GlobalPoolSpread,
    AddCopy,
    ConcatSplit,
    FlattenReshape,
}

/// Chooses a rule for every layer without touching any data.
///
/// Fails if the request is invalid or some layer cannot be handled under the rule set.
pub fn plan(graph: &ModelGraph, req: &AttributionRequest) -> Result<Vec<(u32, Rule)>> {
    req.validate(graph.num_classes)?;
    if let Some(id) = req.stop_layer {
        if graph.position(id).is_none() {
            return Err(Error::InvalidArgument(format!("stop layer {id} is not in the graph")));
        }
    }
    let rs = req.rule_set;
    graph
        .layers
        .iter()
        .map(|l| {
            let rule = match &l.kind {
                LayerKind::Linear { is_final: true, .. } if rs.target_selection() => Rule::FcEnhanced,
                LayerKind::Linear { .. } => Rule::FcPlain,
                LayerKind::Conv2d { .. } if rs.fine_grained() => Rule::ConvReceptiveField,
                LayerKind::Conv2d { .. } => Rule::ConvPlain,
                LayerKind::BatchNorm(_) | LayerKind::LocalResponseNorm(_) if rs.fine_grained() => Rule::NormRatio,
                LayerKind::BatchNorm(_) => Rule::BatchNormPlain,
                LayerKind::LocalResponseNorm(_) => Rule::LrnPlain,
                LayerKind::AvgPool(_) if rs.fine_grained() => match req.avg_pool_policy {
                    AvgPoolPolicy::Auto => Rule::AvgPoolAuto,
                    AvgPoolPolicy::Ratio => Rule::AvgPoolRatio,
                    AvgPoolPolicy::Passthrough => Rule::AvgPoolSpread,
                },
                LayerKind::AvgPool(_) => Rule::AvgPoolSpread,
                LayerKind::Relu if rs == RuleSet::Guided => Rule::ReluGuided,
                LayerKind::Relu => Rule::ReluMask,
                LayerKind::MaxPool(_) => Rule::MaxPoolRoute,
                LayerKind::AdaptiveAvgPool(_) => Rule::AdaptivePoolSpread,
                LayerKind::GlobalAvgPool => Rule::GlobalPoolSpread,
                LayerKind::Add => Rule::AddCopy,
                LayerKind::Concat => Rule::ConcatSplit,
                LayerKind::Flatten => Rule::FlattenReshape,
            };
            Ok((l.id, rule))
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|p| {
            if rs.target_selection() && graph.final_linear().is_none() {
                return Err(Error::MissingRule {
                    layer: graph.layers.last().map(|l| l.id).unwrap_or(0),
                    kind: "linear",
                    rule_set: rs.as_str(),
                });
            }
            Ok(p)
        })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Divisions whose denominator magnitude was raised to ε.
    pub guarded_cells: usize,
    pub warnings: Vec<String>,
}

/// Gradients at every layer after a top-down pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionState {
    /// Gradient at each layer's output, indexed like `ModelGraph::layers`.
    /// `None` for layers below the stop layer.
    pub output_grads: Vec<Option<Tensor>>,
    /// Each processed layer's gradient at its inputs, one per source.
    pub input_grads: Vec<Option<Vec<Tensor>>>,
    /// Gradient at the (preprocessed) network input; `None` if stopped early.
    pub input_grad: Option<Tensor>,
    /// Rules applied, in execution order (top-down).
    pub applied: Vec<(u32, Rule)>,
    pub diagnostics: Diagnostics,
    pub stopped_at: Option<u32>,
}

impl AttributionState {
    /// Gradient at the input features of layer `id` (its first source).
    pub fn input_gradient(&self, graph: &ModelGraph, id: u32) -> Option<&Tensor> {
        let idx = graph.position(id)?;
        self.input_grads[idx].as_ref().and_then(|v| v.first())
    }

    pub fn output_gradient(&self, graph: &ModelGraph, id: u32) -> Option<&Tensor> {
        let idx = graph.position(id)?;
        self.output_grads[idx].as_ref()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => *acc = acc.zip_with(&g, "accumulate", |a, b| a + b)?,
        None => *slot = Some(g),
    }
    Ok(())
}

/// Propagates the target's gradient from the score layer to the input (or to
/// `req.stop_layer`).
pub fn run_attribution(graph: &ModelGraph, trace: &ActivationTrace, req: &AttributionRequest) -> Result<AttributionState> {
    let plan = plan(graph, req)?;
    if trace.outputs.len() != graph.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "trace has {} layers, graph has {}",
            trace.outputs.len(),
            graph.layers.len()
        )));
    }
    let mut diagnostics = Diagnostics::default();
    let score = trace.scores[req.target];
    if score <= 0.0 {
        diagnostics.warnings.push(format!(
            "target score {score} is not positive; the enhancement ratio may fall below 1"
        ));
    }

    let count = graph.layers.len();
    let last = count - 1;
    let stop_idx = req.stop_layer.and_then(|id| graph.position(id)).unwrap_or(0);
    let mut grads: Vec<Option<Tensor>> = vec![None; count];
    let mut input_grads: Vec<Option<Vec<Tensor>>> = vec![None; count];
    let mut input_grad: Option<Tensor> = None;
    let mut applied = Vec::with_capacity(count);

    let seed = init_output_gradient(graph.num_classes, req.target)?;
    grads[last] = Some(Tensor::from_vec(trace.outputs[last].shape(), seed)?);

    for idx in (stop_idx..count).rev() {
        let layer = &graph.layers[idx];
        let g_out = match &grads[idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(trace.outputs[idx].shape()),
        };
        let ins = trace.layer_inputs(graph, idx);
        let (rule, result) = apply_rule(&layer.kind, plan[idx].1, &ins, &trace.outputs[idx], &g_out, req)
            .map_err(|e| e.at_layer(layer.id))?;
        diagnostics.guarded_cells += result.1;
        applied.push((layer.id, rule));

        for (src, g) in graph.sources(idx).into_iter().zip(&result.0) {
            match src {
                Some(s) => accumulate(&mut grads[s], g.clone()),
                None => accumulate(&mut input_grad, g.clone()),
            }
            .map_err(|e| e.at_layer(layer.id))?;
        }
        input_grads[idx] = Some(result.0);
        grads[idx] = Some(g_out);
    }

    let stopped_at = req.stop_layer.filter(|_| stop_idx > 0);
    if stopped_at.is_some() {
        input_grad = None;
    }
    Ok(AttributionState {
        output_grads: grads,
        input_grads,
        input_grad,
        applied,
        diagnostics,
        stopped_at,
    })
}

type RuleResult = (Vec<Tensor>, usize);

fn apply_rule(
    kind: &LayerKind,
    planned: Rule,
    ins: &[&Tensor],
    x_out: &Tensor,
    g_out: &Tensor,
    req: &AttributionRequest,
) -> Result<(Rule, RuleResult)> {
    let x_in = ins[0];
    let single = |t: Tensor| (vec![t], 0usize);
    let counted = |b: Backward| (vec![b.grad], b.guarded);
    let out = match (planned, kind) {
        (Rule::FcEnhanced, LayerKind::Linear { weight, .. }) => {
            counted(backward_fc_final(x_in, weight, &flat(g_out)?, req.alpha, req.eps)?)
        }
        (Rule::FcPlain, LayerKind::Linear { weight, .. }) => single(backward_fc_vanilla(x_in, weight, &flat(g_out)?)?),
        (Rule::ConvReceptiveField, LayerKind::Conv2d { geometry, .. }) => {
            counted(backward_conv_fast(x_in, x_out, g_out, geometry, req.eps)?)
        }
        (Rule::ConvPlain, LayerKind::Conv2d { geometry, weight, .. }) => {
            single(backward_conv_vanilla(x_in.shape(), weight, g_out, geometry)?)
        }
        (Rule::NormRatio, _) => counted(backward_norm(x_in, x_out, g_out, req.eps)?),
        (Rule::BatchNormPlain, LayerKind::BatchNorm(bn)) => single(backward_batch_norm_vanilla(bn, g_out)?),
        (Rule::LrnPlain, LayerKind::LocalResponseNorm(lrn)) => single(backward_lrn_vanilla(x_in, lrn, g_out)?),
        (Rule::ReluGuided, LayerKind::Relu) => single(backward_relu(x_in, g_out, true)?),
        (Rule::AvgPoolAuto, LayerKind::AvgPool(_)) => {
            let resolved = if x_in.min() < 0.0 {
                Rule::AvgPoolRatio
            } else {
                Rule::AvgPoolSpread
            };
            return apply_rule(kind, resolved, ins, x_out, g_out, req);
        }
        (Rule::AvgPoolRatio, LayerKind::AvgPool(geom)) => {
            counted(backward_avg_pool_ratio(x_in, x_out, g_out, geom, req.eps)?)
        }
        (
            Rule::ReluMask
            | Rule::MaxPoolRoute
            | Rule::AvgPoolSpread
            | Rule::AdaptivePoolSpread
            | Rule::GlobalPoolSpread
            | Rule::AddCopy
            | Rule::ConcatSplit
            | Rule::FlattenReshape,
            _,
        ) => (backward_passthrough(kind, ins, g_out)?, 0),
        (rule, kind) => {
            return Err(Error::InvalidArgument(format!(
                "rule {rule:?} does not apply to a {} layer",
                kind.tag()
            )))
        }
    };
    Ok((planned, out))
}

/// Linear layers see their upstream gradient as a flat vector.
fn flat(g: &Tensor) -> Result<Tensor> {
    g.reshape(crate::tensor::Shape::new(1, g.len(), 1, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::run_forward;
    use crate::model::GraphBuilder;
    use crate::tensor::{ConvGeometry, PoolGeometry, Shape};

    fn tiny() -> ModelGraph {
        let geometry = ConvGeometry::new(1, 2, 3, 1, 1);
        let w: Vec<f32> = (0..18).map(|i| ((i * 7 % 11) as f32 - 5.0) / 10.0).collect();
        GraphBuilder::new("tiny", Shape::new(1, 1, 4, 4), 3)
            .layer(LayerKind::Conv2d {
                geometry,
                weight: Tensor::from_vec(geometry.weight_shape(), w).unwrap(),
                bias: vec![0.1, -0.05],
            })
            .layer(LayerKind::Relu)
            .layer(LayerKind::AvgPool(PoolGeometry::new(2, 2, 0)))
            .layer(LayerKind::Flatten)
            .layer(LayerKind::Linear {
                weight: Tensor::from_vec(Shape::new(3, 8, 1, 1), (0..24).map(|i| ((i % 5) as f32 - 1.5) / 3.0).collect()).unwrap(),
                bias: vec![0.0; 3],
                is_final: true,
            })
            .build()
            .unwrap()
    }

    fn image() -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 4, 4), (0..16).map(|i| ((i * 5 % 7) as f32) / 7.0).collect()).unwrap()
    }

    #[test]
    fn rule_set_parsing() {
        assert_eq!("tsgb_fc_only".parse::<RuleSet>().unwrap(), RuleSet::TsgbFcOnly);
        assert_eq!("tsgb-conv-only".parse::<RuleSet>().unwrap(), RuleSet::TsgbConvOnly);
        assert!("lrp".parse::<RuleSet>().is_err());
    }

    #[test]
    fn dispatch_follows_rule_set() {
        let g = tiny();
        let rules = |rs| -> Vec<Rule> {
            plan(&g, &AttributionRequest::new(0, 0.8, rs))
                .unwrap()
                .into_iter()
                .map(|(_, r)| r)
                .collect()
        };
        assert_eq!(rules(RuleSet::Tsgb)[0], Rule::ConvReceptiveField);
        assert_eq!(rules(RuleSet::Tsgb)[4], Rule::FcEnhanced);
        assert_eq!(rules(RuleSet::TsgbFcOnly)[0], Rule::ConvPlain);
        assert_eq!(rules(RuleSet::TsgbFcOnly)[4], Rule::FcEnhanced);
        assert_eq!(rules(RuleSet::TsgbConvOnly)[0], Rule::ConvReceptiveField);
        assert_eq!(rules(RuleSet::TsgbConvOnly)[4], Rule::FcPlain);
        assert_eq!(rules(RuleSet::Guided)[1], Rule::ReluGuided);
        assert_eq!(rules(RuleSet::Vanilla), vec![
            Rule::ConvPlain,
            Rule::ReluMask,
            Rule::AvgPoolSpread,
            Rule::FlattenReshape,
            Rule::FcPlain
        ]);
    }

    #[test]
    fn request_validation() {
        let g = tiny();
        assert!(matches!(
            plan(&g, &AttributionRequest::new(3, 0.8, RuleSet::Tsgb)),
            Err(Error::ClassOutOfRange { index: 3, count: 3 })
        ));
        assert!(plan(&g, &AttributionRequest::new(0, 0.0, RuleSet::Tsgb)).is_err());
        assert!(plan(&g, &AttributionRequest::new(0, 0.8, RuleSet::Tsgb).with_stop_layer(99)).is_err());
    }

    #[test]
    fn missing_final_layer_fails_before_computation() {
        let mut g = tiny();
        if let LayerKind::Linear { is_final, .. } = &mut g.layers[4].kind {
            *is_final = false;
        }
        let err = plan(&g, &AttributionRequest::new(0, 0.8, RuleSet::Tsgb)).unwrap_err();
        assert!(matches!(err, Error::MissingRule { .. }));
        assert!(plan(&g, &AttributionRequest::new(0, 0.8, RuleSet::Vanilla)).is_ok());
    }

    #[test]
    fn state_mirrors_trace_shapes() {
        let g = tiny();
        let trace = run_forward(&g, &image()).unwrap();
        let st = run_attribution(&g, &trace, &AttributionRequest::new(1, 0.8, RuleSet::Tsgb)).unwrap();
        for (idx, grad) in st.output_grads.iter().enumerate() {
            assert_eq!(grad.as_ref().unwrap().shape(), trace.outputs[idx].shape());
        }
        assert_eq!(st.input_grad.as_ref().unwrap().shape(), trace.input.shape());
        assert_eq!(st.applied.len(), 5);
        assert_eq!(st.applied[0], (4, Rule::FcEnhanced));
        // relu output is non-negative, so the average pool keeps its plain spread
        assert_eq!(st.applied[2], (2, Rule::AvgPoolSpread));
        assert_eq!(st.input_gradient(&g, 1).unwrap().shape(), trace.outputs[0].shape());
    }

    #[test]
    fn stop_layer_leaves_input_gradient_empty() {
        let g = tiny();
        let trace = run_forward(&g, &image()).unwrap();
        let req = AttributionRequest::new(0, 0.8, RuleSet::Tsgb).with_stop_layer(2);
        let st = run_attribution(&g, &trace, &req).unwrap();
        assert!(st.input_grad.is_none());
        assert_eq!(st.stopped_at, Some(2));
        assert!(st.output_grads[2].is_some());
        assert!(st.input_gradient(&g, 2).is_some());
        // layer 1 received its output gradient but was never processed
        assert!(st.output_grads[1].is_some());
        assert!(st.input_gradient(&g, 1).is_none());
    }

    #[test]
    fn signed_avg_pool_input_switches_to_ratio_rule() {
        let mut g = tiny();
        // drop the relu so the pool sees signed features
        g.layers.remove(1);
        g.layers[1].inputs = vec![0];
        let trace = run_forward(&g, &image()).unwrap();
        assert!(trace.outputs[0].min() < 0.0);
        let st = run_attribution(&g, &trace, &AttributionRequest::new(0, 0.8, RuleSet::Tsgb)).unwrap();
        assert!(st.applied.contains(&(2, Rule::AvgPoolRatio)));
        let forced = AttributionRequest::new(0, 0.8, RuleSet::Tsgb).with_avg_pool_policy(AvgPoolPolicy::Passthrough);
        let st = run_attribution(&g, &trace, &forced).unwrap();
        assert!(st.applied.contains(&(2, Rule::AvgPoolSpread)));
    }

    #[test]
    fn negative_target_score_warns() {
        let g = tiny();
        let mut trace = run_forward(&g, &image()).unwrap();
        trace.scores[0] = 1.0;
        trace.scores[1] = -1.0;
        let st = run_attribution(&g, &trace, &AttributionRequest::new(1, 0.8, RuleSet::Tsgb)).unwrap();
        assert_eq!(st.diagnostics.warnings.len(), 1);
        let st = run_attribution(&g, &trace, &AttributionRequest::new(0, 0.8, RuleSet::Tsgb)).unwrap();
        assert!(st.diagnostics.warnings.is_empty());
    }
}
