//! Run configuration: built-in defaults, then an optional JSON file, then flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tsgb_core::attribution::{AvgPoolPolicy, RuleSet};
use tsgb_core::saliency::ExportMode;

/// Which class to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// Resolved to the top-1 prediction.
    Predicted,
}

impl Serialize for Target {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Target::Class(c) => s.serialize_u64(*c as u64),
            Target::Predicted => s.serialize_str("predicted"),
        }
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Class(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Class(c) => Ok(Target::Class(c)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "predicted" {
            return Ok(Target::Predicted);
        }
        s.parse()
            .map(Target::Class)
            .map_err(|_| format!("expected a class index or \"predicted\", got {s:?}"))
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Class(c) => write!(f, "{c}"),
            Target::Predicted => f.write_str("predicted"),
        }
    }
}

/// Every setting optional, as read from a config file or from flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub model: Option<PathBuf>,
    pub inputs: Option<Vec<PathBuf>>,
    pub data: Option<PathBuf>,
    pub targets: Option<Vec<Target>>,
    pub alpha: Option<f32>,
    pub rule_set: Option<RuleSet>,
    pub threshold_fraction: Option<f32>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub erase_baseline: Option<f32>,
    pub margin: Option<usize>,
    pub stop_layer: Option<u32>,
    pub truncate: Option<bool>,
    pub step_fraction: Option<f32>,
    pub k: Option<usize>,
    pub avg_pool: Option<AvgPoolPolicy>,
    pub export_mode: Option<ExportMode>,
}

impl PartialConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_slice(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Fields set in `self` win over those in `base`.
    pub fn over(self, base: PartialConfig) -> PartialConfig {
        PartialConfig {
            model: self.model.or(base.model),
            inputs: self.inputs.or(base.inputs),
            data: self.data.or(base.data),
            targets: self.targets.or(base.targets),
            alpha: self.alpha.or(base.alpha),
            rule_set: self.rule_set.or(base.rule_set),
            threshold_fraction: self.threshold_fraction.or(base.threshold_fraction),
            out: self.out.or(base.out),
            seed: self.seed.or(base.seed),
            erase_baseline: self.erase_baseline.or(base.erase_baseline),
            margin: self.margin.or(base.margin),
            stop_layer: self.stop_layer.or(base.stop_layer),
            truncate: self.truncate.or(base.truncate),
            step_fraction: self.step_fraction.or(base.step_fraction),
            k: self.k.or(base.k),
            avg_pool: self.avg_pool.or(base.avg_pool),
            export_mode: self.export_mode.or(base.export_mode),
        }
    }
}

/// Fully resolved settings. `alpha` stays optional until the model is known,
/// since its default depends on the model family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub data: Option<PathBuf>,
    pub targets: Vec<Target>,
    pub alpha: Option<f32>,
    pub rule_set: RuleSet,
    pub threshold_fraction: f32,
    pub out: PathBuf,
    pub seed: u64,
    pub erase_baseline: f32,
    pub margin: usize,
    pub stop_layer: Option<u32>,
    pub truncate: bool,
    pub step_fraction: f32,
    pub k: usize,
    pub avg_pool: AvgPoolPolicy,
    pub export_mode: ExportMode,
}

impl RunConfig {
    /// Fills defaults and checks ranges.
    pub fn resolve(p: PartialConfig) -> Result<Self, String> {
        let cfg = RunConfig {
            model: p.model,
            inputs: p.inputs.unwrap_or_default(),
            data: p.data,
            targets: p.targets.unwrap_or_else(|| vec![Target::Predicted]),
            alpha: p.alpha,
            rule_set: p.rule_set.unwrap_or(RuleSet::Tsgb),
            threshold_fraction: p.threshold_fraction.unwrap_or(0.2),
            out: p.out.unwrap_or_else(|| PathBuf::from("out")),
            seed: p.seed.unwrap_or(0),
            erase_baseline: p.erase_baseline.unwrap_or(0.0),
            margin: p.margin.unwrap_or(15),
            stop_layer: p.stop_layer,
            truncate: p.truncate.unwrap_or(true),
            step_fraction: p.step_fraction.unwrap_or(0.05),
            k: p.k.unwrap_or(5),
            avg_pool: p.avg_pool.unwrap_or_default(),
            export_mode: p.export_mode.unwrap_or(ExportMode::Grayscale),
        };
        if let Some(a) = cfg.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(format!("alpha must be positive, got {a}"));
            }
        }
        if !(cfg.threshold_fraction > 0.0 && cfg.threshold_fraction < 1.0) {
            return Err(format!("threshold fraction must lie in (0, 1), got {}", cfg.threshold_fraction));
        }
        if !(cfg.step_fraction > 0.0 && cfg.step_fraction <= 0.5) {
            return Err(format!("step fraction must lie in (0, 0.5], got {}", cfg.step_fraction));
        }
        if !cfg.erase_baseline.is_finite() {
            return Err("erase baseline must be finite".into());
        }
        if cfg.k == 0 {
            return Err("k must be positive".into());
        }
        if cfg.targets.is_empty() {
            return Err("at least one target is required".into());
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: PartialConfig = serde_json::from_str(r#"{"alpha":0.7,"margin":3,"targets":["predicted",2]}"#).unwrap();
        let flags = PartialConfig {
            alpha: Some(0.9),
            ..PartialConfig::default()
        };
        let cfg = RunConfig::resolve(flags.over(file)).unwrap();
        assert_eq!(cfg.alpha, Some(0.9));
        assert_eq!(cfg.margin, 3);
        assert_eq!(cfg.targets, vec![Target::Predicted, Target::Class(2)]);
        assert_eq!(cfg.threshold_fraction, 0.2);
    }

    #[test]
    fn ranges_are_checked() {
        let bad = |p: PartialConfig| RunConfig::resolve(p).is_err();
        assert!(bad(PartialConfig {
            alpha: Some(0.0),
            ..Default::default()
        }));
        assert!(bad(PartialConfig {
            threshold_fraction: Some(1.0),
            ..Default::default()
        }));
        assert!(serde_json::from_str::<PartialConfig>(r#"{"alpah":1}"#).is_err());
        assert!("predicted".parse::<Target>().is_ok());
        assert!("best".parse::<Target>().is_err());
    }
}
