//! Committed fixtures from `fixtures/make_fixtures.py`, an independent float64
//! implementation of the forward pass and the TSGB map.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Deserialize;
use tsgb::{nnsm, pnm};
use tsgb_core::attribution::{AttributionRequest, RuleSet};
use tsgb_core::saliency;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Deserialize)]
struct Expected {
    alpha: f32,
    scores: Vec<f64>,
    predicted: usize,
    saliency: Vec<f64>,
}

fn expected() -> Expected {
    serde_json::from_slice(&std::fs::read(fixture("tiny_expected.json")).unwrap()).unwrap()
}

#[test]
fn python_written_model_is_canonical() {
    let bytes = std::fs::read(fixture("tiny.nnsm")).unwrap();
    let g = nnsm::from_bytes(&bytes).unwrap();
    assert_eq!(nnsm::to_bytes(&g).unwrap(), bytes);
}

#[test]
fn scores_and_map_match_the_f64_oracle() {
    let exp = expected();
    let g = nnsm::load_model(fixture("tiny.nnsm")).unwrap();
    let img = pnm::read_image(fixture("tiny.ppm")).unwrap();
    let req = AttributionRequest::new(exp.predicted, exp.alpha, RuleSet::Tsgb);
    let (trace, state, map) = saliency::explain(&g, &img, &req).unwrap();

    for (a, b) in trace.scores.iter().zip(&exp.scores) {
        assert!((*a as f64 - b).abs() <= 1e-5, "score {a} vs {b}");
    }
    assert_eq!(state.diagnostics.guarded_cells, 0);
    let scale = exp.saliency.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in map.values().iter().zip(&exp.saliency) {
        assert!((*a as f64 - b).abs() <= 1e-5 * scale, "saliency {a} vs {b}");
    }
}

#[test]
fn cli_explain_reproduces_golden_pgm() {
    let exp = expected();
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_tsgb"))
        .args(["explain", "--target", "predicted", "--alpha", "0.8", "--model"])
        .arg(fixture("tiny.nnsm"))
        .arg("--input")
        .arg(fixture("tiny.ppm"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let name = format!("tiny_{}", exp.predicted);
    let got = std::fs::read(dir.path().join(format!("{name}.pgm"))).unwrap();
    let want = std::fs::read(fixture(&format!("{name}.pgm"))).unwrap();
    assert_eq!(got.len(), want.len());
    // float32 against float64 may round a pixel to the neighbouring level
    let worst = got.iter().zip(&want).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
    assert!(worst <= 1, "pixel differs by {worst}");

    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join(format!("{name}.json"))).unwrap()).unwrap();
    assert_eq!(sidecar["target"], exp.predicted);
    assert_eq!(sidecar["predicted"], exp.predicted);
    assert_eq!(sidecar["requested_target"], "predicted");
    assert_eq!(sidecar["rule_set"], "tsgb");
    assert_eq!(sidecar["guarded_cells"], 0);
    let scores = sidecar["scores"].as_array().unwrap();
    for (a, b) in scores.iter().zip(&exp.scores) {
        assert!((a.as_f64().unwrap() - b).abs() <= 1e-5);
    }
}
