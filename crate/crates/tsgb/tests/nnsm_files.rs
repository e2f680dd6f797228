use serde_json::Value;
use tsgb::nnsm::{from_bytes, load_model, save_model, to_bytes, NnsmError};
use tsgb_core::model::{BatchNorm, Family, GraphBuilder, LayerKind, Lrn, ModelGraph, Preprocess};
use tsgb_core::tensor::PoolGeometry;
use tsgb_core::{forward, ConvGeometry, Shape, Tensor};

fn ramp(shape: Shape, scale: f32) -> Tensor {
    let n = shape.numel();
    let data = (0..n).map(|i| ((i * 37 % 23) as f32 - 11.0) * scale).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Uses every layer kind: a residual block, a two-branch concat, LRN and all pools.
fn every_kind() -> ModelGraph {
    let mut b = GraphBuilder::new("every-kind", Shape::new(1, 3, 8, 8), 4)
        .family(Family::ResnetLike)
        .preprocess(Preprocess {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        });
    let conv = |i, o, k, p| LayerKind::Conv2d {
        geometry: ConvGeometry::new(i, o, k, 1, p),
        weight: ramp(Shape::new(o, i, k, k), 0.01),
        bias: vec![0.05; o],
    };
    let c0 = b.push(conv(3, 4, 3, 1));
    let bn = b.push(LayerKind::BatchNorm(BatchNorm {
        gamma: vec![1.0, 0.5, 2.0, 1.5],
        beta: vec![0.1, -0.1, 0.0, 0.2],
        mean: vec![0.0, 0.1, -0.1, 0.3],
        var: vec![1.0, 0.25, 4.0, 2.0],
        eps: 1e-5,
    }));
    let r = b.push(LayerKind::Relu);
    let c1 = b.push(conv(4, 4, 3, 1));
    let add = b.push_from(vec![c1, r], LayerKind::Add);
    let lrn = b.push(LayerKind::LocalResponseNorm(Lrn {
        size: 3,
        alpha: 1e-4,
        beta: 0.75,
        k: 2.0,
    }));
    let mp = b.push(LayerKind::MaxPool(PoolGeometry::new(2, 2, 0)));
    let side = b.push_from(vec![add], LayerKind::AvgPool(PoolGeometry::new(3, 2, 1)));
    let cat = b.push_from(vec![mp, side], LayerKind::Concat);
    let _ = (c0, bn, lrn, cat);
    b.push(LayerKind::AdaptiveAvgPool([2, 2]));
    b.push(LayerKind::Flatten);
    b.push(LayerKind::Linear {
        weight: ramp(Shape::new(6, 32, 1, 1), 0.02),
        bias: vec![0.0; 6],
        is_final: false,
    });
    b.push(LayerKind::Relu);
    b.push(LayerKind::Linear {
        weight: ramp(Shape::new(4, 6, 1, 1), 0.3),
        bias: vec![0.1, 0.2, 0.3, 0.4],
        is_final: true,
    });
    b.build().unwrap()
}

fn split(bytes: &[u8]) -> (Value, Vec<u8>) {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    (header, bytes[16 + len..].to_vec())
}

fn join(header: &Value, blob: &[u8]) -> Vec<u8> {
    let text = serde_json::to_vec(header).unwrap();
    let mut out = b"NNSM".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(blob);
    out
}

#[test]
fn every_layer_kind_round_trips_through_a_file() {
    let g = every_kind();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nnsm");
    save_model(&g, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, g);
    assert_eq!(to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());

    let x = ramp(g.input_shape, 0.04).map(|v| v + 0.5);
    let a = forward::run_forward(&g, &x).unwrap().scores;
    let b = forward::run_forward(&back, &x).unwrap().scores;
    assert_eq!(a, b);
}

#[test]
fn header_is_compact_and_ordered() {
    let bytes = to_bytes(&every_kind()).unwrap();
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
    assert!(text.starts_with("{\"name\":\"every-kind\",\"family\":\"resnet-like\",\"input_shape\":[1,3,8,8]"));
    assert!(!text.contains(' ') && !text.contains('\n'));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_model(dir.path().join("absent.nnsm")), Err(NnsmError::Io(_))));
}

#[test]
fn unknown_kind_names_the_layer() {
    let (mut h, blob) = split(&to_bytes(&every_kind()).unwrap());
    h["layers"][2]["kind"] = Value::from("swish");
    match from_bytes(&join(&h, &blob)) {
        Err(NnsmError::UnknownLayerKind { id, kind }) => {
            assert_eq!(id, 2);
            assert_eq!(kind, "swish");
        }
        other => panic!("expected UnknownLayerKind, got {other:?}"),
    }
}

#[test]
fn tensor_shape_must_match_params() {
    let (mut h, blob) = split(&to_bytes(&every_kind()).unwrap());
    h["layers"][0]["params"]["out_channels"] = Value::from(5);
    assert!(matches!(from_bytes(&join(&h, &blob)), Err(NnsmError::ShapeInconsistency(_))));
}

#[test]
fn tensor_outside_blob_is_truncation() {
    let (mut h, blob) = split(&to_bytes(&every_kind()).unwrap());
    let last = h["layers"].as_array().unwrap().len() - 1;
    h["layers"][last]["tensors"]["bias"]["offset"] = Value::from(blob.len() as u64);
    assert!(matches!(from_bytes(&join(&h, &blob)), Err(NnsmError::Truncated { .. })));
}

#[test]
fn graph_violations_are_reported() {
    let (mut h, blob) = split(&to_bytes(&every_kind()).unwrap());
    let last = h["layers"].as_array().unwrap().len() - 1;
    h["layers"][last]["params"]["final"] = Value::from(false);
    assert!(matches!(from_bytes(&join(&h, &blob)), Err(NnsmError::Invalid(_))));
}

#[test]
fn malformed_header_is_json_error() {
    let mut bytes = to_bytes(&every_kind()).unwrap();
    bytes[16] = b'[';
    assert!(matches!(from_bytes(&bytes), Err(NnsmError::Json(_))));
}
