mod common;

use common::{four_layer_finite_differences, four_layer_net, four_layer_scores_f64, rng, uniform};
use tsgb_core::attribution::{run_attribution, AttributionRequest, RuleSet};
use tsgb_core::forward::run_forward;
use tsgb_core::Shape;

#[test]
fn forward_matches_f64_oracle() {
    let net = four_layer_net(30);
    let img = uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng(31));
    let raw: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let want = four_layer_scores_f64(&net, &raw);
    let got = run_forward(&net, &img).unwrap().scores;
    for (a, b) in got.iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn vanilla_gradient_matches_finite_differences() {
    let net = four_layer_net(32);
    let img = uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng(33));
    let raw: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let trace = run_forward(&net, &img).unwrap();
    for c in 0..5 {
        let st = run_attribution(&net, &trace, &AttributionRequest::new(c, 0.8, RuleSet::Vanilla)).unwrap();
        // the rule set differentiates with respect to the normalised input
        let g = st.input_grad.unwrap();
        let fd = four_layer_finite_differences(&net, &raw, c, 1e-4);
        for (i, want) in fd.iter().enumerate() {
            let got = g.data()[i] as f64 / net.preprocess.std[i / 64] as f64;
            assert!((got - want).abs() <= 1e-3, "class {c} pixel {i}: {got} vs {want}");
        }
    }
}
