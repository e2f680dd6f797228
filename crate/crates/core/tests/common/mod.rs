#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsgb_core::{ConvGeometry, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Naive zero-padded convolution in f64.
pub fn conv_oracle(x: &Tensor, w: &Tensor, bias: &[f32], g: &ConvGeometry) -> Vec<f64> {
    let s = x.shape();
    let (oh, ow) = g.output_hw(s.h, s.w).unwrap();
    let [kh, kw] = g.kernel;
    let mut out = vec![0.0f64; g.out_channels * oh * ow];
    for o in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.get(o).copied().unwrap_or(0.0) as f64;
                for m in 0..g.in_channels {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * g.stride[0] + ky) as isize - g.padding[0] as isize;
                            let ix = (ox * g.stride[1] + kx) as isize - g.padding[1] as isize;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            acc += x.at(0, m, iy as usize, ix as usize) as f64 * w.at(o, m, ky, kx) as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// A random conv instance: (x_in, weights, geometry), with channels ≤ `max_c`
/// and spatial extent ≤ `max_hw`.
pub fn conv_case(rng: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> (Tensor, Tensor, ConvGeometry) {
    loop {
        let m = rng.random_range(1..=max_c);
        let n = rng.random_range(1..=max_c);
        let k = rng.random_range(1..=3usize);
        let stride = rng.random_range(1..=2usize);
        let pad = rng.random_range(0..=1usize);
        let h = rng.random_range(2..=max_hw);
        let w = rng.random_range(2..=max_hw);
        let g = ConvGeometry::new(m, n, k, stride, pad);
        if g.output_hw(h, w).is_err() {
            continue;
        }
        let x = uniform(Shape::new(1, m, h, w), -1.0, 1.0, rng);
        let wt = uniform(g.weight_shape(), -1.0, 1.0, rng);
        return (x, wt, g);
    }
}

/// `max |a - b| / max |b|`.
pub fn max_rel_err(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y as f64).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

use tsgb_core::model::{GraphBuilder, LayerKind, ModelGraph, Preprocess};
use tsgb_core::tensor::PoolGeometry;

/// `conv 3x3 (3 -> 4) -> relu -> max pool 2 -> linear (64 -> 5)` on 3x8x8
/// inputs, with random parameters and non-trivial preprocessing.
pub fn four_layer_net(seed: u64) -> ModelGraph {
    let mut r = rng(seed);
    let g = ConvGeometry::new(3, 4, 3, 1, 1);
    let w = uniform(g.weight_shape(), -0.5, 0.5, &mut r);
    let b: Vec<f32> = (0..4).map(|_| r.random_range(-0.1..0.1)).collect();
    let fc = uniform(Shape::new(5, 64, 1, 1), -0.3, 0.3, &mut r);
    let fb: Vec<f32> = (0..5).map(|_| r.random_range(-0.1..0.1)).collect();
    GraphBuilder::new("four-layer", Shape::new(1, 3, 8, 8), 5)
        .preprocess(Preprocess {
            mean: vec![0.4, 0.5, 0.6],
            std: vec![0.2, 0.25, 0.3],
        })
        .layer(LayerKind::Conv2d { geometry: g, weight: w, bias: b })
        .layer(LayerKind::Relu)
        .layer(LayerKind::MaxPool(PoolGeometry::new(2, 2, 0)))
        .layer(LayerKind::Linear { weight: fc, bias: fb, is_final: true })
        .build()
        .unwrap()
}

/// Independent f64 forward pass of [`four_layer_net`] returning class scores.
pub fn four_layer_scores_f64(net: &ModelGraph, image: &[f64]) -> Vec<f64> {
    let (LayerKind::Conv2d { weight, bias, .. }, LayerKind::Linear { weight: fc, bias: fb, .. }) =
        (&net.layers[0].kind, &net.layers[3].kind)
    else {
        panic!("not the four-layer fixture");
    };
    let x: Vec<f64> = (0..3 * 64)
        .map(|i| {
            let c = i / 64;
            (image[i] - net.preprocess.mean[c] as f64) / net.preprocess.std[c] as f64
        })
        .collect();
    let mut act = vec![0.0f64; 4 * 64];
    for o in 0..4 {
        for y in 0..8 {
            for xx in 0..8 {
                let mut acc = bias[o] as f64;
                for m in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                acc += x[m * 64 + iy as usize * 8 + ix as usize] * weight.at(o, m, ky, kx) as f64;
                            }
                        }
                    }
                }
                act[o * 64 + y * 8 + xx] = acc.max(0.0);
            }
        }
    }
    let mut pooled = vec![0.0f64; 64];
    for o in 0..4 {
        for y in 0..4 {
            for xx in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(act[o * 64 + (2 * y + dy) * 8 + 2 * xx + dx]);
                    }
                }
                pooled[o * 16 + y * 4 + xx] = m;
            }
        }
    }
    (0..5)
        .map(|c| fb[c] as f64 + (0..64).map(|i| fc.data()[c * 64 + i] as f64 * pooled[i]).sum::<f64>())
        .collect()
}

/// Central differences of the class-`c` score with respect to every raw pixel.
pub fn four_layer_finite_differences(net: &ModelGraph, image: &[f64], c: usize, h: f64) -> Vec<f64> {
    let mut work = image.to_vec();
    (0..image.len())
        .map(|i| {
            work[i] = image[i] + h;
            let up = four_layer_scores_f64(net, &work)[c];
            work[i] = image[i] - h;
            let down = four_layer_scores_f64(net, &work)[c];
            work[i] = image[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}
