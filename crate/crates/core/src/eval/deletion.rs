//! Deletion metric: erase the most salient pixels first and integrate the
//! target probability over the fraction removed. Lower is better.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribution::{AttributionRequest, RuleSet};
use crate::error::{Error, Result};
use crate::eval::{Aggregation, ConfigEcho, Dataset, EvalReport, Record};
use crate::forward::{run_forward, softmax, top_k};
use crate::model::ModelGraph;
use crate::saliency::{self, SaliencyMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeletionConfig {
    /// Fraction of pixels erased per step, in `(0, 0.5]`.
    pub step_fraction: f32,
    /// Erased pixels take this value after input normalisation, so 0 is the
    /// dataset mean colour.
    pub erase_baseline: f32,
}

impl Default for DeletionConfig {
    fn default() -> Self {
        DeletionConfig {
            step_fraction: 0.05,
            erase_baseline: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeletionCurve {
    /// Fraction of pixels removed at each point, from 0 to 1.
    pub fractions: Vec<f64>,
    /// Softmax probability of the target at each point.
    pub probabilities: Vec<f64>,
    pub auc: f64,
}

impl DeletionCurve {
    /// Perturbation steps executed (the unperturbed point is not a step).
    pub fn steps(&self) -> usize {
        self.fractions.len() - 1
    }
}

/// Pixel indices by descending truncated saliency; ties keep row-major order.
pub fn deletion_order(m: &SaliencyMap) -> Vec<usize> {
    let v = m.values();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].max(0.0).total_cmp(&v[a].max(0.0)));
    idx
}

/// A uniformly random pixel order.
pub fn random_order(pixels: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pixels).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

pub fn deletion_score(
    graph: &ModelGraph,
    image: &Tensor,
    m: &SaliencyMap,
    class: usize,
    cfg: &DeletionConfig,
) -> Result<DeletionCurve> {
    deletion_curve_for_order(graph, image, &deletion_order(m), class, cfg)
}

/// Deletion curve for an explicit pixel order (a permutation of `0..H*W`).
pub fn deletion_curve_for_order(
    graph: &ModelGraph,
    image: &Tensor,
    order: &[usize],
    class: usize,
    cfg: &DeletionConfig,
) -> Result<DeletionCurve> {
    let f = cfg.step_fraction;
    if !(f > 0.0 && f <= 0.5) {
        return Err(Error::InvalidArgument(format!("step fraction must lie in (0, 0.5], got {f}")));
    }
    if class >= graph.num_classes {
        return Err(Error::ClassOutOfRange {
            index: class,
            count: graph.num_classes,
        });
    }
    let s = image.shape();
    let plane = s.plane();
    if order.len() != plane {
        return Err(Error::ShapeMismatch {
            op: "deletion",
            what: "pixel order length",
            expected: plane,
            actual: order.len(),
        });
    }
    let fill: Vec<f32> = (0..s.c)
        .map(|c| graph.preprocess.mean[c] + cfg.erase_baseline * graph.preprocess.std[c])
        .collect();

    let step = f as f64;
    // the small slack keeps 1/0.1 from becoming 11 steps
    let steps = libm::ceil(1.0 / step - 1e-9) as usize;
    let mut work = image.clone();
    let mut removed = 0usize;
    let mut fractions = Vec::with_capacity(steps + 1);
    let mut probabilities = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let frac = (k as f64 * step).min(1.0);
        let target = (libm::round(frac * plane as f64) as usize).min(plane);
        for &p in &order[removed..target] {
            for (c, &v) in fill.iter().enumerate() {
                work.data_mut()[c * plane + p] = v;
            }
        }
        removed = removed.max(target);
        let trace = run_forward(graph, &work)?;
        fractions.push(frac);
        probabilities.push(softmax(&trace.scores)[class]);
    }
    let auc = trapezoid(&fractions, &probabilities);
    Ok(DeletionCurve {
        fractions,
        probabilities,
        auc,
    })
}

/// Deletion AUC per sample, explaining each sample's top-1 class.
pub fn deletion_report(
    graph: &ModelGraph,
    data: &Dataset,
    alpha: f32,
    rule_set: RuleSet,
    cfg: &DeletionConfig,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(data.len());
    for s in &data.samples {
        let trace = run_forward(graph, &s.image)?;
        let c = top_k(&trace.scores, 1)?[0];
        let req = AttributionRequest::new(c, alpha, rule_set);
        let state = crate::attribution::run_attribution(graph, &trace, &req)?;
        let m = saliency::assemble(&state, &trace, &req, &graph.name)?;
        let curve = deletion_score(graph, &s.image, &m, c, cfg)?;
        records.push(Record {
            image: s.id.clone(),
            class: Some(c),
            value: curve.auc,
        });
    }
    let mut config = ConfigEcho {
        alpha: Some(alpha),
        rule_set: Some(rule_set),
        ..ConfigEcho::default()
    };
    config.extra.insert("step_fraction".into(), cfg.step_fraction as f64);
    config.extra.insert("erase_baseline".into(), cfg.erase_baseline as f64);
    Ok(EvalReport::new("deletion_auc", Aggregation::Records, records, config))
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0)
        .sum()
}
