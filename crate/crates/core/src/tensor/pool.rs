use alloc::format;

use serde::{Deserialize, Serialize};

use super::{ConvGeometry, Shape, Tensor};
use crate::error::{Error, Result};

/// Window geometry shared by max and average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl PoolGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolGeometry {
            kernel: [kernel; 2],
            stride: [stride; 2],
            padding: [padding; 2],
        }
    }

    pub fn window(&self) -> usize {
        self.kernel[0] * self.kernel[1]
    }

    fn as_conv(&self, channels: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: channels,
            out_channels: channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.padding[0] * 2 > self.kernel[0] || self.padding[1] * 2 > self.kernel[1] {
            return Err(Error::Geometry(format!(
                "pool padding {:?} exceeds half the kernel {:?}",
                self.padding, self.kernel
            )));
        }
        self.as_conv(input.c).output_shape(input)
    }
}

/// Window offsets of output `(oy, ox)` that fall inside the input, as flat plane indices.
fn for_window(geom: &PoolGeometry, s: Shape, oy: usize, ox: usize, mut f: impl FnMut(usize)) {
    for ky in 0..geom.kernel[0] {
        let Some(iy) = ConvGeometry::source(oy, ky, geom.stride[0], geom.padding[0], s.h) else {
            continue;
        };
        for kx in 0..geom.kernel[1] {
            if let Some(ix) = ConvGeometry::source(ox, kx, geom.stride[1], geom.padding[1], s.w) {
                f(iy * s.w + ix);
            }
        }
    }
}

/// Flat plane index of the max inside each window; first in row-major order wins ties.
fn argmax_in_window(geom: &PoolGeometry, s: Shape, plane: &[f32], oy: usize, ox: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f32::NEG_INFINITY;
    for_window(geom, s, oy, ox, |i| {
        if best == usize::MAX || plane[i] > best_v {
            best = i;
            best_v = plane[i];
        }
    });
    best
}

pub fn max_pool2d(input: &Tensor, geom: &PoolGeometry) -> Result<Tensor> {
    let s = input.shape();
    let os = geom.output_shape(s)?;
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let i = argmax_in_window(geom, s, plane, oy, ox);
                    let o = out.index(n, c, oy, ox);
                    out.data_mut()[o] = plane[i];
                }
            }
        }
    }
    Ok(out)
}

/// Routes each output gradient to the recorded argmax of its window.
pub fn max_pool2d_backward(x_in: &Tensor, g_out: &Tensor, geom: &PoolGeometry) -> Result<Tensor> {
    let s = x_in.shape();
    let os = geom.output_shape(s)?;
    super::same_shape("max_pool2d_backward", os, g_out.shape())?;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x_in.plane(n, c);
            let base = out.index(n, c, 0, 0);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let i = argmax_in_window(geom, s, plane, oy, ox);
                    out.data_mut()[base + i] += g_out.at(n, c, oy, ox);
                }
            }
        }
    }
    Ok(out)
}

/// Average pooling; padded cells count towards the window size.
pub fn avg_pool2d(input: &Tensor, geom: &PoolGeometry) -> Result<Tensor> {
    let s = input.shape();
    let os = geom.output_shape(s)?;
    let inv = 1.0 / geom.window() as f32;
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = 0.0f32;
                    for_window(geom, s, oy, ox, |i| acc += plane[i]);
                    let o = out.index(n, c, oy, ox);
                    out.data_mut()[o] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool2d`]: each output value is spread over its window divided
/// by the window size.
pub fn avg_pool2d_adjoint(g_out: &Tensor, geom: &PoolGeometry, in_shape: Shape) -> Result<Tensor> {
    let os = geom.output_shape(in_shape)?;
    super::same_shape("avg_pool2d_adjoint", os, g_out.shape())?;
    let inv = 1.0 / geom.window() as f32;
    let mut out = Tensor::zeros(in_shape);
    for n in 0..os.n {
        for c in 0..os.c {
            let base = out.index(n, c, 0, 0);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let g = g_out.at(n, c, oy, ox) * inv;
                    let dst = out.data_mut();
                    for_window(geom, in_shape, oy, ox, |i| dst[base + i] += g);
                }
            }
        }
    }
    Ok(out)
}

/// `[start, end)` of adaptive bin `i` when `len` is split into `bins` parts.
pub fn adaptive_bounds(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

pub fn adaptive_avg_pool2d(input: &Tensor, out_hw: [usize; 2]) -> Result<Tensor> {
    let s = input.shape();
    if out_hw[0] == 0 || out_hw[1] == 0 {
        return Err(Error::Geometry(format!("adaptive pool target {:?} must be positive", out_hw)));
    }
    let os = Shape::new(s.n, s.c, out_hw[0], out_hw[1]);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for oy in 0..os.h {
                let (y0, y1) = adaptive_bounds(oy, s.h, os.h);
                for ox in 0..os.w {
                    let (x0, x1) = adaptive_bounds(ox, s.w, os.w);
                    let mut acc = 0.0f32;
                    for y in y0..y1 {
                        acc += plane[y * s.w + x0..y * s.w + x1].iter().sum::<f32>();
                    }
                    let o = out.index(n, c, oy, ox);
                    out.data_mut()[o] = acc / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool2d_adjoint(g_out: &Tensor, in_shape: Shape) -> Result<Tensor> {
    let os = g_out.shape();
    super::same_shape("adaptive_avg_pool2d_adjoint", in_shape.with_channels(os.c), Shape::new(os.n, os.c, in_shape.h, in_shape.w))?;
    let mut out = Tensor::zeros(in_shape);
    for n in 0..os.n {
        for c in 0..os.c {
            for oy in 0..os.h {
                let (y0, y1) = adaptive_bounds(oy, in_shape.h, os.h);
                for ox in 0..os.w {
                    let (x0, x1) = adaptive_bounds(ox, in_shape.w, os.w);
                    let g = g_out.at(n, c, oy, ox) / ((y1 - y0) * (x1 - x0)) as f32;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let i = out.index(n, c, y, x);
                            out.data_mut()[i] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let s = input.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    let inv = 1.0 / s.plane() as f32;
    for n in 0..s.n {
        for c in 0..s.c {
            let acc: f32 = input.plane(n, c).iter().sum();
            out.data_mut()[n * s.c + c] = acc * inv;
        }
    }
    out
}

pub fn global_avg_pool_adjoint(g_out: &Tensor, in_shape: Shape) -> Result<Tensor> {
    super::same_shape("global_avg_pool_adjoint", Shape::new(in_shape.n, in_shape.c, 1, 1), g_out.shape())?;
    let inv = 1.0 / in_shape.plane() as f32;
    let mut out = Tensor::zeros(in_shape);
    let p = in_shape.plane();
    for (k, chunk) in out.data_mut().chunks_mut(p).enumerate() {
        let g = g_out.data()[k] * inv;
        chunk.iter_mut().for_each(|v| *v = g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t(h: usize, w: usize, d: &[f32]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, h, w), d.to_vec()).unwrap()
    }

    #[test]
    fn max_pool_and_first_index_tie_break() {
        let x = t(2, 4, &[1.0, 3.0, 2.0, 2.0, 3.0, 0.0, 2.0, 2.0]);
        let g = PoolGeometry::new(2, 2, 0);
        let y = max_pool2d(&x, &g).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        let gin = max_pool2d_backward(&x, &Tensor::from_vec(y.shape(), vec![1.0, 5.0]).unwrap(), &g).unwrap();
        // ties: index 1 beats index 4 in the first window, index 2 wins the second
        assert_eq!(gin.data(), &[0.0, 1.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_adjoint_matches_inner_products() {
        let x = t(4, 4, &(0..16).map(|v| v as f32 * 0.25 - 1.0).collect::<alloc::vec::Vec<_>>());
        let g = PoolGeometry::new(3, 1, 1);
        let y = avg_pool2d(&x, &g).unwrap();
        let r = Tensor::from_vec(y.shape(), (0..y.len()).map(|v| (v % 5) as f32 - 2.0).collect()).unwrap();
        let back = avg_pool2d_adjoint(&r, &g, x.shape()).unwrap();
        let lhs = y.dot(&r).unwrap();
        let rhs = x.dot(&back).unwrap();
        assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
    }

    #[test]
    fn adaptive_bins_cover_uneven_input() {
        assert_eq!(adaptive_bounds(0, 5, 3), (0, 2));
        assert_eq!(adaptive_bounds(1, 5, 3), (1, 4));
        assert_eq!(adaptive_bounds(2, 5, 3), (3, 5));
        let x = t(1, 5, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = adaptive_avg_pool2d(&x, [1, 3]).unwrap();
        assert_eq!(y.data(), &[1.5, 3.0, 4.5]);
        let back = adaptive_avg_pool2d_adjoint(&Tensor::from_vec(y.shape(), vec![1.0, 1.0, 1.0]).unwrap(), x.shape()).unwrap();
        let lhs = y.sum();
        let rhs = x.dot(&back).unwrap();
        assert!((lhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn global_pool_roundtrip() {
        let x = t(2, 2, &[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(global_avg_pool(&x).data(), &[3.0]);
        let b = global_avg_pool_adjoint(&Tensor::vector(vec![4.0]), x.shape()).unwrap();
        assert_eq!(b.data(), &[1.0; 4]);
    }
}
