//! Datasets on disk: a directory of PPM/PGM images plus `ground_truth.json`.
//!
//! ```json
//! {"num_classes":3,"images":[{"id":"img_0000","file":"img_0000.ppm","labels":[0],
//!   "regions":[{"class":0,"bbox":{"x0":3,"y0":4,"x1":12,"y1":15}}]}]}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use tsgb_core::eval::{Dataset, Region, Sample};

use crate::pnm;

pub const INDEX: &str = "ground_truth.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed {INDEX}: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image {file}: {source}")]
    Image { file: String, source: pnm::PnmError },
    #[error("invalid ground truth: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub file: String,
    pub labels: Vec<usize>,
    #[serde(default)]
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub num_classes: usize,
    pub images: Vec<IndexEntry>,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Dataset, usize), DatasetError> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX);
    let text = std::fs::read(&index_path).map_err(|source| DatasetError::Io {
        path: index_path.display().to_string(),
        source,
    })?;
    let index: Index = serde_json::from_slice(&text)?;
    let mut samples = Vec::with_capacity(index.images.len());
    for e in index.images {
        let image = pnm::read_image(dir.join(&e.file)).map_err(|source| DatasetError::Image {
            file: e.file.clone(),
            source,
        })?;
        let mut labels = e.labels;
        labels.sort_unstable();
        labels.dedup();
        samples.push(Sample {
            id: e.id,
            image,
            labels,
            regions: e.regions,
        });
    }
    let data = Dataset { samples };
    data.validate(index.num_classes)
        .map_err(|e| DatasetError::Invalid(e.to_string()))?;
    Ok((data, index.num_classes))
}

/// Encodes every image and the index in memory; nothing touches the disk.
pub fn encode_dataset(data: &Dataset, num_classes: usize) -> Result<Vec<(String, Vec<u8>)>, DatasetError> {
    let mut files = Vec::with_capacity(data.len() + 1);
    let mut images = Vec::with_capacity(data.len());
    for s in &data.samples {
        let ext = if s.image.shape().c == 1 { "pgm" } else { "ppm" };
        let file = format!("{}.{ext}", s.id);
        let bytes = pnm::encode(&s.image).map_err(|source| DatasetError::Image {
            file: file.clone(),
            source,
        })?;
        files.push((file.clone(), bytes));
        images.push(IndexEntry {
            id: s.id.clone(),
            file,
            labels: s.labels.clone(),
            regions: s.regions.clone(),
        });
    }
    let index = Index { num_classes, images };
    let mut json = serde_json::to_vec_pretty(&index)?;
    json.push(b'\n');
    files.push((INDEX.into(), json));
    Ok(files)
}
