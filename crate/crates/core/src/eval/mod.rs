//! Quantitative protocols: deletion, Pointing Game, top-k localisation and the
//! parameter-randomisation sanity check, plus a synthetic suite with known
//! ground truth.

pub mod deletion;
pub mod loc;
pub mod pointing;
pub mod sanity;
pub mod synthetic;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionRequest, RuleSet};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::saliency::{self, BBox, SaliencyMap};
use crate::tensor::Tensor;

/// One labelled object region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub class: usize,
    pub bbox: BBox,
}

/// An image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Raw image, `1 x C x H x W`.
    pub image: Tensor,
    /// Classes present, ascending and without repeats.
    pub labels: Vec<usize>,
    pub regions: Vec<Region>,
}

impl Sample {
    pub fn regions_of(&self, class: usize) -> impl Iterator<Item = &BBox> {
        self.regions.iter().filter(move |r| r.class == class).map(|r| &r.bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks ids are unique, labels are in range, and every label has a region
    /// inside the image.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = BTreeMap::new();
        for s in &self.samples {
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate sample id {}", s.id)));
            }
            let shape = s.image.shape();
            for &l in &s.labels {
                if l >= num_classes {
                    return Err(Error::ClassOutOfRange {
                        index: l,
                        count: num_classes,
                    });
                }
                if s.regions_of(l).next().is_none() {
                    return Err(Error::InvalidArgument(format!("sample {}: class {l} has no region", s.id)));
                }
            }
            for r in &s.regions {
                if !r.bbox.is_within(shape.h, shape.w) {
                    return Err(Error::InvalidArgument(format!(
                        "sample {}: region {:?} lies outside the {}x{} image",
                        s.id, r.bbox, shape.h, shape.w
                    )));
                }
            }
        }
        Ok(())
    }
}

/// How a report's aggregate is formed from its records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean and population std over all records.
    Records,
    /// Per-class mean first, then mean and std over classes.
    ClassMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    pub value: f64,
}

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfigEcho {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_set: Option<RuleSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_fraction: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Metric-specific settings (margin, step fraction, top-k and so on).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub aggregation: Aggregation,
    pub records: Vec<Record>,
    pub mean: f64,
    pub std: f64,
    pub config: ConfigEcho,
}

impl EvalReport {
    pub fn new(metric: impl Into<String>, aggregation: Aggregation, records: Vec<Record>, config: ConfigEcho) -> Self {
        let (mean, std) = aggregate(&records, aggregation);
        EvalReport {
            metric: metric.into(),
            aggregation,
            records,
            mean,
            std,
            config,
        }
    }

    /// Recomputes `(mean, std)` from the records.
    pub fn recompute(&self) -> (f64, f64) {
        aggregate(&self.records, self.aggregation)
    }
}

fn aggregate(records: &[Record], how: Aggregation) -> (f64, f64) {
    match how {
        Aggregation::Records => mean_std(records.iter().map(|r| r.value)),
        Aggregation::ClassMean => {
            let mut per: BTreeMap<Option<usize>, (f64, usize)> = BTreeMap::new();
            for r in records {
                let e = per.entry(r.class).or_insert((0.0, 0));
                e.0 += r.value;
                e.1 += 1;
            }
            mean_std(per.values().map(|&(s, n)| s / n as f64))
        }
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` when empty.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Saliency maps keyed by `(sample id, class)`.
pub type MapSet = BTreeMap<(String, usize), SaliencyMap>;

/// One map per labelled class of every sample.
pub fn label_maps(graph: &ModelGraph, data: &Dataset, alpha: f32, rule_set: RuleSet) -> Result<MapSet> {
    let mut out = MapSet::new();
    for s in &data.samples {
        for &c in &s.labels {
            let req = AttributionRequest::new(c, alpha, rule_set);
            let (_, _, map) = saliency::explain(graph, &s.image, &req)?;
            out.insert((s.id.clone(), c), map);
        }
    }
    Ok(out)
}
