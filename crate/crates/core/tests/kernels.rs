mod common;

use common::{conv_case, conv_oracle, rng, uniform};
use rand::Rng;
use tsgb_core::forward::top_k;
use tsgb_core::tensor::{
    adaptive_avg_pool2d, adaptive_avg_pool2d_adjoint, avg_pool2d, avg_pool2d_adjoint, conv2d, conv2d_transposed,
    max_pool2d, PoolGeometry,
};
use tsgb_core::{Shape, Tensor};

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(1);
    for _ in 0..100 {
        let (x, w, g) = conv_case(&mut r, 6, 10);
        let bias: Vec<f32> = (0..g.out_channels).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = conv2d(&x, &w, &bias, &g).unwrap();
        let want = conv_oracle(&x, &w, &bias, &g);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn transposed_conv_is_the_adjoint() {
    let mut r = rng(2);
    for _ in 0..100 {
        let (x, w, g) = conv_case(&mut r, 5, 9);
        let s = x.shape();
        let y = uniform(g.output_shape(s).unwrap(), -1.0, 1.0, &mut r);
        let lhs = conv2d(&x, &w, &[], &g).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv2d_transposed(&y, &w, &g, (s.h, s.w)).unwrap()).unwrap();
        assert!((lhs - rhs).abs() <= 1e-4 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}

#[test]
fn pooling_adjoints() {
    let mut r = rng(3);
    for _ in 0..50 {
        let k = r.random_range(1..=3usize);
        let geom = PoolGeometry::new(k, r.random_range(1..=2), r.random_range(0..=k / 2));
        let x = uniform(Shape::new(1, 2, r.random_range(3..9), r.random_range(3..9)), -1.0, 1.0, &mut r);
        let Ok(out) = avg_pool2d(&x, &geom) else { continue };
        let y = uniform(out.shape(), -1.0, 1.0, &mut r);
        let lhs = out.dot(&y).unwrap();
        let rhs = x.dot(&avg_pool2d_adjoint(&y, &geom, x.shape()).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-5);

        let bins = [r.random_range(1..=3usize), r.random_range(1..=3usize)];
        let out = adaptive_avg_pool2d(&x, bins).unwrap();
        let y = uniform(out.shape(), -1.0, 1.0, &mut r);
        let lhs = out.dot(&y).unwrap();
        let rhs = x.dot(&adaptive_avg_pool2d_adjoint(&y, x.shape()).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-5);
    }
}

#[test]
fn max_pool_output_dominates_its_window() {
    let mut r = rng(4);
    let geom = PoolGeometry::new(3, 2, 1);
    let x = uniform(Shape::new(1, 3, 9, 9), -1.0, 1.0, &mut r);
    let y = max_pool2d(&x, &geom).unwrap();
    let s = y.shape();
    for c in 0..s.c {
        for oy in 0..s.h {
            for ox in 0..s.w {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy >= 0 && ix >= 0 && iy < 9 && ix < 9 {
                            assert!(y.at(0, c, oy, ox) >= x.at(0, c, iy as usize, ix as usize));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn top_k_agrees_with_full_sort() {
    let mut r = rng(5);
    for _ in 0..200 {
        let n = r.random_range(1..20);
        // coarse values force ties
        let v: Vec<f32> = (0..n).map(|_| r.random_range(0..5) as f32).collect();
        let k = r.random_range(1..=n);
        let mut all: Vec<usize> = (0..n).collect();
        all.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(top_k(&v, k).unwrap(), all[..k].to_vec());
    }
}

#[test]
fn single_interior_pixel_scatters_to_a_block() {
    let g = tsgb_core::ConvGeometry::new(1, 1, 3, 1, 1);
    let mut x = vec![0.0; 25];
    x[12] = 1.0;
    let x = Tensor::from_vec(Shape::new(1, 1, 5, 5), x).unwrap();
    let y = conv2d(&x, &Tensor::full(g.weight_shape(), 1.0), &[], &g).unwrap();
    for row in 0..5 {
        for col in 0..5 {
            let inside = (1..=3).contains(&row) && (1..=3).contains(&col);
            assert_eq!(y.at(0, 0, row, col), if inside { 1.0 } else { 0.0 });
        }
    }
}
