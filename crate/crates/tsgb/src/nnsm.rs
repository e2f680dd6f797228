//! NNSM v1 model files.
//!
//! Layout: the magic `NNSM`, a little-endian `u32` version (1), a little-endian
//! `u64` header length, the UTF-8 JSON header, then one blob of little-endian
//! `f32` values. The header lists the layers in topological order; each layer
//! names its parameter tensors by shape and byte offset into the blob.
//!
//! The writer is canonical: compact JSON, tensors laid out in layer order with
//! no gaps. Files it produces load and re-save to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tsgb_core::model::{BatchNorm, Family, LayerKind, LayerSpec, Lrn, ModelGraph, Preprocess};
use tsgb_core::tensor::PoolGeometry;
use tsgb_core::{ConvGeometry, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"NNSM";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum NnsmError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an NNSM file (magic bytes {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported NNSM version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated {what}: need {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("{0} unexpected bytes after the weight blob")]
    TrailingData(u64),
    #[error("malformed header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("layer {id}: unknown layer kind {kind:?}")]
    UnknownLayerKind { id: u32, kind: String },
    #[error("shape inconsistency: {0}")]
    ShapeInconsistency(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, NnsmError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRef {
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    id: u32,
    inputs: Vec<u32>,
    kind: String,
    #[serde(default = "empty_object")]
    params: Value,
    #[serde(default)]
    tensors: BTreeMap<String, TensorRef>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    name: String,
    family: Family,
    input_shape: [usize; 4],
    num_classes: usize,
    preprocess: Preprocess,
    /// Raw layer objects; the kind tag is checked before the rest is decoded.
    layers: Vec<Value>,
    blob_len: u64,
}

#[derive(Debug, Deserialize)]
struct ConvParams {
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
}

#[derive(Debug, Deserialize)]
struct LinearParams {
    #[serde(rename = "final")]
    is_final: bool,
}

#[derive(Debug, Deserialize)]
struct AdaptiveParams {
    output: [usize; 2],
}

#[derive(Debug, Deserialize)]
struct BnParams {
    eps: f32,
}

/// Tensor names per kind, in blob order.
fn tensor_names(kind: &str) -> &'static [&'static str] {
    match kind {
        "conv2d" | "linear" => &["weight", "bias"],
        "batch_norm" => &["gamma", "beta", "mean", "var"],
        _ => &[],
    }
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, shape: Vec<usize>, data: &[f32]) -> TensorRef {
        let offset = self.bytes.len() as u64;
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRef { shape, offset }
    }
}

fn layer_record(layer: &LayerSpec, blob: &mut BlobWriter) -> LayerRecord {
    let mut tensors = BTreeMap::new();
    let params = match &layer.kind {
        LayerKind::Conv2d { geometry: g, weight, bias } => {
            tensors.insert("weight".into(), blob.push(weight.shape().to_array().to_vec(), weight.data()));
            tensors.insert("bias".into(), blob.push(vec![bias.len()], bias));
            json!({
                "in_channels": g.in_channels,
                "out_channels": g.out_channels,
                "kernel": g.kernel,
                "stride": g.stride,
                "padding": g.padding,
            })
        }
        LayerKind::Linear { weight, bias, is_final } => {
            let s = weight.shape();
            tensors.insert("weight".into(), blob.push(vec![s.n, s.c], weight.data()));
            tensors.insert("bias".into(), blob.push(vec![bias.len()], bias));
            json!({ "final": is_final })
        }
        LayerKind::MaxPool(p) | LayerKind::AvgPool(p) => {
            json!({ "kernel": p.kernel, "stride": p.stride, "padding": p.padding })
        }
        LayerKind::AdaptiveAvgPool(out) => json!({ "output": out }),
        LayerKind::BatchNorm(bn) => {
            let c = bn.gamma.len();
            for (name, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
                tensors.insert(name.into(), blob.push(vec![c], v));
            }
            json!({ "eps": bn.eps })
        }
        LayerKind::LocalResponseNorm(l) => json!({ "size": l.size, "alpha": l.alpha, "beta": l.beta, "k": l.k }),
        LayerKind::Relu | LayerKind::Flatten | LayerKind::Add | LayerKind::Concat | LayerKind::GlobalAvgPool => {
            empty_object()
        }
    };
    LayerRecord {
        id: layer.id,
        inputs: layer.inputs.clone(),
        kind: layer.kind.tag().into(),
        params,
        tensors,
    }
}

/// Serialises a validated graph to NNSM bytes.
pub fn to_bytes(g: &ModelGraph) -> Result<Vec<u8>> {
    g.check().map_err(|e| NnsmError::Invalid(e.to_string()))?;
    let mut blob = BlobWriter { bytes: Vec::new() };
    let mut layers = Vec::with_capacity(g.layers.len());
    for l in &g.layers {
        layers.push(serde_json::to_value(layer_record(l, &mut blob))?);
    }
    let header = Header {
        name: g.name.clone(),
        family: g.family,
        input_shape: g.input_shape.to_array(),
        num_classes: g.num_classes,
        preprocess: g.preprocess.clone(),
        layers,
        blob_len: blob.bytes.len() as u64,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + blob.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob.bytes);
    Ok(out)
}

pub fn save_model(g: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(g)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    from_bytes(&std::fs::read(path)?)
}

fn param<T: serde::de::DeserializeOwned>(rec: &LayerRecord) -> Result<T> {
    serde_json::from_value(rec.params.clone()).map_err(NnsmError::Json)
}

fn read_tensor(rec: &LayerRecord, name: &str, blob: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let t = rec.tensors.get(name).ok_or_else(|| {
        NnsmError::ShapeInconsistency(format!("layer {}: missing tensor {name:?}", rec.id))
    })?;
    let count: usize = t.shape.iter().product();
    let start = t.offset;
    let end = start + 4 * count as u64;
    if start % 4 != 0 {
        return Err(NnsmError::ShapeInconsistency(format!(
            "layer {}: tensor {name:?} offset {start} is not a multiple of 4",
            rec.id
        )));
    }
    if end > blob.len() as u64 {
        return Err(NnsmError::Truncated {
            what: "weight blob",
            expected: end,
            actual: blob.len() as u64,
        });
    }
    let data = blob[start as usize..end as usize]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((t.shape.clone(), data))
}

fn expect_shape(rec: &LayerRecord, name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(NnsmError::ShapeInconsistency(format!(
            "layer {}: tensor {name:?} has shape {got:?}, expected {want:?}",
            rec.id
        )));
    }
    Ok(())
}

fn vector(rec: &LayerRecord, name: &str, blob: &[u8], len: usize) -> Result<Vec<f32>> {
    let (shape, data) = read_tensor(rec, name, blob)?;
    expect_shape(rec, name, &shape, &[len])?;
    Ok(data)
}

fn decode_layer(rec: &LayerRecord, blob: &[u8]) -> Result<LayerKind> {
    let expected: Vec<&str> = tensor_names(&rec.kind).to_vec();
    if let Some(extra) = rec.tensors.keys().find(|k| !expected.contains(&k.as_str())) {
        return Err(NnsmError::ShapeInconsistency(format!(
            "layer {}: unexpected tensor {extra:?} for a {} layer",
            rec.id, rec.kind
        )));
    }
    let kind = match rec.kind.as_str() {
        "conv2d" => {
            let p: ConvParams = param(rec)?;
            let geometry = ConvGeometry {
                in_channels: p.in_channels,
                out_channels: p.out_channels,
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
            };
            let (shape, data) = read_tensor(rec, "weight", blob)?;
            expect_shape(rec, "weight", &shape, &geometry.weight_shape().to_array())?;
            let weight = Tensor::from_vec(geometry.weight_shape(), data).expect("length follows the shape");
            let bias = vector(rec, "bias", blob, p.out_channels)?;
            LayerKind::Conv2d { geometry, weight, bias }
        }
        "linear" => {
            let p: LinearParams = param(rec)?;
            let (shape, data) = read_tensor(rec, "weight", blob)?;
            if shape.len() != 2 {
                return Err(NnsmError::ShapeInconsistency(format!(
                    "layer {}: linear weight must be 2-D, got {shape:?}",
                    rec.id
                )));
            }
            let weight = Tensor::from_vec(Shape::new(shape[0], shape[1], 1, 1), data).expect("length follows the shape");
            let bias = vector(rec, "bias", blob, shape[0])?;
            LayerKind::Linear {
                weight,
                bias,
                is_final: p.is_final,
            }
        }
        "relu" => LayerKind::Relu,
        "max_pool" => LayerKind::MaxPool(param::<PoolGeometry>(rec)?),
        "avg_pool" => LayerKind::AvgPool(param::<PoolGeometry>(rec)?),
        "adaptive_avg_pool" => LayerKind::AdaptiveAvgPool(param::<AdaptiveParams>(rec)?.output),
        "batch_norm" => {
            let p: BnParams = param(rec)?;
            let c = rec.tensors.get("gamma").map_or(0, |t| t.shape.iter().product());
            LayerKind::BatchNorm(BatchNorm {
                gamma: vector(rec, "gamma", blob, c)?,
                beta: vector(rec, "beta", blob, c)?,
                mean: vector(rec, "mean", blob, c)?,
                var: vector(rec, "var", blob, c)?,
                eps: p.eps,
            })
        }
        "local_response_norm" => LayerKind::LocalResponseNorm(param::<Lrn>(rec)?),
        "flatten" => LayerKind::Flatten,
        "add" => LayerKind::Add,
        "concat" => LayerKind::Concat,
        "global_avg_pool" => LayerKind::GlobalAvgPool,
        other => {
            return Err(NnsmError::UnknownLayerKind {
                id: rec.id,
                kind: other.into(),
            })
        }
    };
    Ok(kind)
}

/// Parses and fully validates an NNSM byte string.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 4 {
        let mut m = [0u8; 4];
        m[..bytes.len()].copy_from_slice(bytes);
        return Err(NnsmError::BadMagic(m));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if &magic != MAGIC {
        return Err(NnsmError::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(NnsmError::Truncated {
            what: "preamble",
            expected: PREAMBLE as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version != VERSION {
        return Err(NnsmError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes"));
    let header_end = PREAMBLE as u64 + header_len;
    if header_end > bytes.len() as u64 {
        return Err(NnsmError::Truncated {
            what: "header",
            expected: header_end,
            actual: bytes.len() as u64,
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end as usize])?;
    let blob = &bytes[header_end as usize..];
    if (blob.len() as u64) < header.blob_len {
        return Err(NnsmError::Truncated {
            what: "weight blob",
            expected: header.blob_len,
            actual: blob.len() as u64,
        });
    }
    if blob.len() as u64 > header.blob_len {
        return Err(NnsmError::TrailingData(blob.len() as u64 - header.blob_len));
    }

    let mut layers = Vec::with_capacity(header.layers.len());
    for raw in &header.layers {
        // read the tag first so an unknown kind is reported as such rather than
        // as a schema error in its parameters
        let kind = raw.get("kind").and_then(Value::as_str).unwrap_or_default();
        if !LayerKind::TAGS.contains(&kind) {
            let id = raw.get("id").and_then(Value::as_u64).unwrap_or(u64::from(u32::MAX)) as u32;
            return Err(NnsmError::UnknownLayerKind { id, kind: kind.into() });
        }
        let rec: LayerRecord = serde_json::from_value(raw.clone())?;
        layers.push(LayerSpec {
            id: rec.id,
            inputs: rec.inputs.clone(),
            kind: decode_layer(&rec, blob)?,
        });
    }
    let graph = ModelGraph {
        name: header.name,
        family: header.family,
        input_shape: Shape::from_array(header.input_shape),
        num_classes: header.num_classes,
        preprocess: header.preprocess,
        layers,
    };
    let violations = graph.validate();
    if !violations.is_empty() {
        let msg = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        return Err(NnsmError::Invalid(msg));
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsgb_core::eval::synthetic::{detector_model, SyntheticSpec};

    #[test]
    fn round_trip_is_bitwise() {
        let g = detector_model(&SyntheticSpec::default());
        let bytes = to_bytes(&g).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn distinct_failures() {
        let g = detector_model(&SyntheticSpec::default());
        let bytes = to_bytes(&g).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(NnsmError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes(&bad), Err(NnsmError::UnsupportedVersion(2))));

        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(from_bytes(short), Err(NnsmError::Truncated { what: "weight blob", .. })));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(from_bytes(&long), Err(NnsmError::TrailingData(4))));
    }
}
