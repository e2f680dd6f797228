//! Parameter-randomisation sanity check.
//!
//! Selected layers get fresh parameters drawn from a normal distribution with
//! each tensor's original mean and standard deviation. Maps from the original
//! and the randomised model are compared with Spearman's rank correlation.
//! A method that actually depends on the parameters should decorrelate.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attribution::{AttributionRequest, RuleSet};
use crate::error::{Error, Result};
use crate::eval::{mean_std, Aggregation, ConfigEcho, Dataset, EvalReport, Record};
use crate::forward::{run_forward, top_k};
use crate::model::{LayerKind, ModelGraph};
use crate::saliency::{self, SaliencyMap};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SanityMode {
    /// Randomise exactly these layer ids in one go. An empty list changes nothing.
    Layers(Vec<u32>),
    /// Randomise every parameterised layer at once.
    AllAtOnce,
    /// Randomise parameterised layers cumulatively from the output down, one
    /// stage per layer.
    Cascading,
}

/// Draws `n` values like `values`, matching its mean and population std.
fn resample(values: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (mean, std) = mean_std(values.iter().map(|&v| v as f64));
    if values.is_empty() {
        return Vec::new();
    }
    let normal = Normal::new(mean, std).expect("population std is finite and non-negative");
    (0..values.len()).map(|_| normal.sample(rng) as f32).collect()
}

/// Copy of `graph` with the parameters of `ids` redrawn. Each layer uses its
/// own stream of the seeded generator, so a layer's new parameters do not
/// depend on which other layers are selected.
pub fn randomize(graph: &ModelGraph, ids: &[u32], seed: u64) -> Result<ModelGraph> {
    let mut out = graph.clone();
    for &id in ids {
        let idx = graph
            .position(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer with id {id}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        match &mut out.layers[idx].kind {
            LayerKind::Conv2d { weight, bias, .. } | LayerKind::Linear { weight, bias, .. } => {
                let w = resample(weight.data(), &mut rng);
                weight.data_mut().copy_from_slice(&w);
                *bias = resample(bias, &mut rng);
            }
            LayerKind::BatchNorm(bn) => {
                bn.gamma = resample(&bn.gamma, &mut rng);
                bn.beta = resample(&bn.beta, &mut rng);
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "layer {id} ({}) has no parameters to randomise",
                    other.tag()
                )))
            }
        }
    }
    Ok(out)
}

/// Ranks starting at 1, with tied values sharing their average rank.
pub fn average_ranks(v: &[f32]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = alloc::vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation. Identical inputs give exactly 1; if either
/// input is constant (and they differ) the result is 0.
pub fn spearman(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal lengths");
    if a == b {
        return 1.0;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / libm::sqrt(va * vb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SanityStage {
    /// Layer ids randomised in this stage.
    pub randomized: Vec<u32>,
    /// Correlation of the truncated maps.
    pub truncated: EvalReport,
    /// Correlation of the absolute-value maps.
    pub absolute: EvalReport,
}

fn reference_maps(graph: &ModelGraph, data: &Dataset, alpha: f32, rule_set: RuleSet) -> Result<Vec<(usize, SaliencyMap)>> {
    data.samples
        .iter()
        .map(|s| {
            let trace = run_forward(graph, &s.image)?;
            let c = top_k(&trace.scores, 1)?[0];
            let req = AttributionRequest::new(c, alpha, rule_set);
            let state = crate::attribution::run_attribution(graph, &trace, &req)?;
            Ok((c, saliency::assemble(&state, &trace, &req, &graph.name)?))
        })
        .collect()
}

fn stage(
    graph: &ModelGraph,
    data: &Dataset,
    refs: &[(usize, SaliencyMap)],
    ids: Vec<u32>,
    alpha: f32,
    rule_set: RuleSet,
    seed: u64,
) -> Result<SanityStage> {
    let g = randomize(graph, &ids, seed)?;
    let mut trunc = Vec::with_capacity(refs.len());
    let mut abs = Vec::with_capacity(refs.len());
    for (s, (c, m0)) in data.samples.iter().zip(refs) {
        let req = AttributionRequest::new(*c, alpha, rule_set);
        let (_, _, m1) = saliency::explain(&g, &s.image, &req)?;
        let t = |m: &SaliencyMap| m.values().iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
        let a = |m: &SaliencyMap| m.values().iter().map(|v| v.abs()).collect::<Vec<_>>();
        let rec = |value| Record {
            image: s.id.clone(),
            class: Some(*c),
            value,
        };
        trunc.push(rec(spearman(&t(m0), &t(&m1))));
        abs.push(rec(spearman(&a(m0), &a(&m1))));
    }
    let mut config = ConfigEcho {
        alpha: Some(alpha),
        rule_set: Some(rule_set),
        seed: Some(seed),
        ..ConfigEcho::default()
    };
    config.extra.insert("randomized_layers".into(), ids.len() as f64);
    Ok(SanityStage {
        randomized: ids,
        truncated: EvalReport::new("sanity_spearman_truncated", Aggregation::Records, trunc, config.clone()),
        absolute: EvalReport::new("sanity_spearman_absolute", Aggregation::Records, abs, config),
    })
}

/// Runs the check. Each image's target is the original model's top-1 class and
/// stays fixed after randomisation. `Layers` and `AllAtOnce` give one stage;
/// `Cascading` gives one per parameterised layer.
pub fn sanity_check(
    graph: &ModelGraph,
    data: &Dataset,
    alpha: f32,
    rule_set: RuleSet,
    mode: &SanityMode,
    seed: u64,
) -> Result<Vec<SanityStage>> {
    let refs = reference_maps(graph, data, alpha, rule_set)?;
    let params: Vec<u32> = graph
        .layers
        .iter()
        .filter(|l| l.kind.has_parameters())
        .map(|l| l.id)
        .collect();
    match mode {
        SanityMode::Layers(ids) => Ok(alloc::vec![stage(graph, data, &refs, ids.clone(), alpha, rule_set, seed)?]),
        SanityMode::AllAtOnce => Ok(alloc::vec![stage(graph, data, &refs, params, alpha, rule_set, seed)?]),
        SanityMode::Cascading => (1..=params.len())
            .map(|k| {
                let ids = params[params.len() - k..].to_vec();
                stage(graph, data, &refs, ids, alpha, rule_set, seed)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &a), 1.0);
        assert_eq!(spearman(&a, &[10.0, 20.0, 30.0, 40.0]), 1.0);
        assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&a, &[0.0; 4]), 0.0);
    }

    #[test]
    fn resample_matches_moments_roughly() {
        let src: Vec<f32> = (0..4000).map(|i| (i % 7) as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = resample(&src, &mut rng);
        let (m0, s0) = mean_std(src.iter().map(|&v| v as f64));
        let (m1, s1) = mean_std(out.iter().map(|&v| v as f64));
        assert!((m0 - m1).abs() < 0.1);
        assert!((s0 - s1).abs() < 0.1);
        assert_ne!(src, out);
    }
}
