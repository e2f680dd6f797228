//! Pointing Game: a hit when a map's maximum falls inside a region of its class.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::eval::{Aggregation, ConfigEcho, Dataset, EvalReport, MapSet, Record};
use crate::saliency::{argmax_point, truncate_negatives};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointingConfig {
    /// Tolerance in pixels around each region.
    pub margin: usize,
    /// Take the argmax of the truncated map rather than the signed one.
    pub truncate: bool,
}

impl Default for PointingConfig {
    fn default() -> Self {
        PointingConfig {
            margin: 15,
            truncate: true,
        }
    }
}

/// One record per (image, labelled class), 1 for a hit and 0 for a miss.
/// The aggregate is the mean over classes of per-class accuracy.
pub fn pointing_game(maps: &MapSet, data: &Dataset, cfg: &PointingConfig) -> Result<EvalReport> {
    let mut records = Vec::new();
    for s in &data.samples {
        for &c in &s.labels {
            let m = maps
                .get(&(s.id.clone(), c))
                .ok_or_else(|| Error::InvalidArgument(format!("no map for sample {} class {c}", s.id)))?;
            let (row, col) = if cfg.truncate {
                argmax_point(&truncate_negatives(m))
            } else {
                argmax_point(m)
            };
            let hit = s.regions_of(c).any(|b| b.dilate(cfg.margin).contains(row, col));
            records.push(Record {
                image: s.id.clone(),
                class: Some(c),
                value: if hit { 1.0 } else { 0.0 },
            });
        }
    }
    let mut config = ConfigEcho::default();
    config.extra.insert("margin".into(), cfg.margin as f64);
    config.extra.insert("truncate".into(), if cfg.truncate { 1.0 } else { 0.0 });
    Ok(EvalReport::new("pointing_game", Aggregation::ClassMean, records, config))
}
