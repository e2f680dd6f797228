//! Top-k localisation error: an image is correct when one of its top-k
//! predictions is a labelled class whose thresholded map box overlaps a ground
//! truth box of that class with IoU of at least 0.5.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attribution::{AttributionRequest, RuleSet};
use crate::error::{Error, Result};
use crate::eval::{Aggregation, ConfigEcho, Dataset, EvalReport, Record};
use crate::forward::{run_forward, top_k};
use crate::model::ModelGraph;
use crate::saliency::{self, binarize_bbox, SaliencyMap};

/// Threshold fractions searched by [`loc_error_search`].
pub const THRESHOLD_GRID: [f32; 10] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocConfig {
    pub k: usize,
    pub alpha: f32,
    pub rule_set: RuleSet,
}

/// Maps for every labelled class among an image's top-k predictions.
struct Candidates {
    image: String,
    maps: Vec<(usize, SaliencyMap)>,
}

fn candidates(graph: &ModelGraph, data: &Dataset, cfg: &LocConfig) -> Result<Vec<Candidates>> {
    if data.samples.iter().any(|s| s.regions.is_empty()) {
        return Err(Error::InvalidArgument("localisation needs ground-truth boxes on every sample".into()));
    }
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut out = Vec::with_capacity(data.len());
    for s in &data.samples {
        let trace = run_forward(graph, &s.image)?;
        let mut maps = Vec::new();
        for c in top_k(&trace.scores, cfg.k.min(graph.num_classes))? {
            if !s.labels.contains(&c) {
                continue;
            }
            let req = AttributionRequest::new(c, cfg.alpha, cfg.rule_set);
            let state = crate::attribution::run_attribution(graph, &trace, &req)?;
            maps.push((c, saliency::assemble(&state, &trace, &req, &graph.name)?));
        }
        out.push(Candidates {
            image: s.id.clone(),
            maps,
        });
    }
    Ok(out)
}

fn score(data: &Dataset, cands: &[Candidates], threshold: f32, cfg: &LocConfig) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(cands.len());
    for (s, cand) in data.samples.iter().zip(cands) {
        let mut correct = false;
        for (c, m) in &cand.maps {
            let b = match binarize_bbox(m, threshold) {
                Ok(b) => b,
                Err(Error::EmptyMap) => continue,
                Err(e) => return Err(e),
            };
            if s.regions_of(*c).any(|gt| b.iou(gt) >= 0.5) {
                correct = true;
                break;
            }
        }
        records.push(Record {
            image: cand.image.clone(),
            class: None,
            value: if correct { 0.0 } else { 1.0 },
        });
    }
    let mut config = ConfigEcho {
        alpha: Some(cfg.alpha),
        rule_set: Some(cfg.rule_set),
        threshold_fraction: Some(threshold),
        ..ConfigEcho::default()
    };
    config.extra.insert("k".into(), cfg.k as f64);
    Ok(EvalReport::new(format!("top{}_loc_error", cfg.k), Aggregation::Records, records, config))
}

pub fn loc_error(graph: &ModelGraph, data: &Dataset, threshold_fraction: f32, cfg: &LocConfig) -> Result<EvalReport> {
    let cands = candidates(graph, data, cfg)?;
    score(data, &cands, threshold_fraction, cfg)
}

/// Evaluates every threshold in `grid` and returns the lowest-error report,
/// with the per-threshold errors echoed in its config as `grid_<t>` entries.
/// Earlier thresholds win ties.
pub fn loc_error_search(graph: &ModelGraph, data: &Dataset, grid: &[f32], cfg: &LocConfig) -> Result<EvalReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    let cands = candidates(graph, data, cfg)?;
    let mut best: Option<EvalReport> = None;
    let mut tried = Vec::with_capacity(grid.len());
    for &t in grid {
        let rep = score(data, &cands, t, cfg)?;
        tried.push((t, rep.mean));
        if best.as_ref().is_none_or(|b| rep.mean < b.mean) {
            best = Some(rep);
        }
    }
    let mut best = best.expect("grid is non-empty");
    for (t, e) in tried {
        best.config.extra.insert(format!("grid_{t}"), e);
    }
    Ok(best)
}
