//! Dense rank-4 tensors and the numeric kernels built on them.
//!
//! Layout is fixed: `(batch, channel, height, width)`, row-major with the batch
//! outermost. Every operation is a pure function of its arguments.

mod conv;
mod pool;

pub use conv::{conv2d, conv2d_transposed, ConvGeometry};
pub(crate) use conv::ones_kernel;
pub use pool::{
    adaptive_avg_pool2d, adaptive_avg_pool2d_adjoint, adaptive_bounds, avg_pool2d,
    avg_pool2d_adjoint, global_avg_pool, global_avg_pool_adjoint, max_pool2d, max_pool2d_backward,
    PoolGeometry,
};

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn to_array(self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub const fn from_array(a: [usize; 4]) -> Self {
        Shape::new(a[0], a[1], a[2], a[3])
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Shape::new(self.n, c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense `f32` tensor. The shape never changes after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                what: "data length",
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 convenience: a `1 x len x 1 x 1` tensor.
    pub fn vector(data: Vec<f32>) -> Self {
        let shape = Shape::new(1, data.len(), 1, 1);
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    /// One `h x w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, mut f: impl FnMut(f32, f32) -> f32) -> Result<Tensor> {
        same_shape(op, self.shape, other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// `Σ self ⊙ other` accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        same_shape("dot", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

pub(crate) fn same_shape(op: &'static str, expected: Shape, actual: Shape) -> Result<()> {
    let pairs = [
        ("batch", expected.n, actual.n),
        ("channels", expected.c, actual.c),
        ("height", expected.h, actual.h),
        ("width", expected.w, actual.w),
    ];
    for (what, e, a) in pairs {
        if e != a {
            return Err(Error::ShapeMismatch {
                op,
                what,
                expected: e,
                actual: a,
            });
        }
    }
    Ok(())
}

/// Binary elementwise operators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinaryOp {
    Add,
    Mul,
    /// Division with the denominator magnitude clamped to at least `eps`.
    DivWithEps(f32),
}

/// Guarded scalar division: `num / den`, with `|den|` raised to `eps` when smaller
/// and the sign of `den` kept (zero counts as positive). The flag reports whether
/// the guard fired.
#[inline]
pub fn guarded_div(num: f32, den: f32, eps: f32) -> (f32, bool) {
    if den.abs() >= eps {
        (num / den, false)
    } else if den.is_sign_negative() && den != 0.0 {
        (num / -eps, true)
    } else {
        (num / eps, true)
    }
}

/// Elementwise `a op b`.
///
/// Shapes must match, except that either operand may have a single channel, in
/// which case it is broadcast across the other operand's channels.
pub fn elementwise(a: &Tensor, b: &Tensor, op: BinaryOp) -> Result<Tensor> {
    let (sa, sb) = (a.shape, b.shape);
    let out_shape = if sa == sb || (sb.c == 1 && sa.with_channels(1) == sb) {
        sa
    } else if sa.c == 1 && sb.with_channels(1) == sa {
        sb
    } else {
        // always errors here since the shapes differ
        same_shape("elementwise", sa, sb)?;
        sa
    };
    let f = |x: f32, y: f32| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Mul => x * y,
        BinaryOp::DivWithEps(eps) => guarded_div(x, y, eps).0,
    };
    let mut out = Tensor::zeros(out_shape);
    let plane = out_shape.plane();
    for n in 0..out_shape.n {
        for c in 0..out_shape.c {
            let pa = a.plane(n, if sa.c == 1 { 0 } else { c });
            let pb = b.plane(n, if sb.c == 1 { 0 } else { c });
            let start = (n * out_shape.c + c) * plane;
            for (i, o) in out.data[start..start + plane].iter_mut().enumerate() {
                *o = f(pa[i], pb[i]);
            }
        }
    }
    Ok(out)
}

/// −1, 0 or +1 per element.
pub fn sign_mask(a: &Tensor) -> Tensor {
    a.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

pub fn abs(a: &Tensor) -> Tensor {
    a.map(f32::abs)
}

/// Sums over the channel axis, giving an `n x 1 x h x w` tensor.
pub fn channel_sum(a: &Tensor) -> Tensor {
    let s = a.shape;
    let mut out = Tensor::zeros(s.with_channels(1));
    let plane = s.plane();
    for n in 0..s.n {
        let dst = &mut out.data[n * plane..(n + 1) * plane];
        for c in 0..s.c {
            for (d, &v) in dst.iter_mut().zip(a.plane(n, c)) {
                *d += v;
            }
        }
    }
    out
}
