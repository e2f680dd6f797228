use alloc::format;

use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel: [kernel; 2],
            stride: [stride; 2],
            padding: [padding; 2],
        }
    }

    /// The same window with a single input and output channel.
    pub fn single_channel(&self) -> Self {
        ConvGeometry {
            in_channels: 1,
            out_channels: 1,
            ..*self
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel[0], self.kernel[1])
    }

    /// `floor((in + 2p - k) / s) + 1` per axis; errors unless strictly positive.
    pub fn output_hw(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.stride[0] == 0 || self.stride[1] == 0 {
            return Err(Error::Geometry(format!("stride must be positive, got {:?}", self.stride)));
        }
        if self.kernel[0] == 0 || self.kernel[1] == 0 {
            return Err(Error::Geometry(format!("kernel must be positive, got {:?}", self.kernel)));
        }
        let axis = |len: usize, k: usize, s: usize, p: usize| {
            let padded = len + 2 * p;
            if padded < k {
                None
            } else {
                Some((padded - k) / s + 1)
            }
        };
        match (
            axis(in_h, self.kernel[0], self.stride[0], self.padding[0]),
            axis(in_w, self.kernel[1], self.stride[1], self.padding[1]),
        ) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Geometry(format!(
                "kernel {:?} with padding {:?} does not fit a {}x{} input",
                self.kernel, self.padding, in_h, in_w
            ))),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (h, w) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, h, w))
    }

    /// Input-axis index for output position `o` and kernel tap `k`, or `None`
    /// when it lands in the zero padding.
    #[inline]
    pub(crate) fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < len {
            Some(pos as usize)
        } else {
            None
        }
    }
}

fn check_channels(op: &'static str, what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            op,
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

fn check_weights(op: &'static str, weights: &Tensor, geom: &ConvGeometry) -> Result<()> {
    let ws = weights.shape();
    let gs = geom.weight_shape();
    check_channels(op, "weight out-channels", gs.n, ws.n)?;
    check_channels(op, "weight in-channels", gs.c, ws.c)?;
    check_channels(op, "kernel height", gs.h, ws.h)?;
    check_channels(op, "kernel width", gs.w, ws.w)
}

/// Forward convolution with zero padding.
///
/// `weights` is `out x in x kh x kw`; `bias` holds one value per output channel
/// or is empty.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &[f32], geom: &ConvGeometry) -> Result<Tensor> {
    let is = input.shape();
    check_channels("conv2d", "input channels", geom.in_channels, is.c)?;
    check_weights("conv2d", weights, geom)?;
    if !bias.is_empty() {
        check_channels("conv2d", "bias length", geom.out_channels, bias.len())?;
    }
    let os = geom.output_shape(is)?;
    let [kh, kw] = geom.kernel;
    let [sh, sw] = geom.stride;
    let [ph, pw] = geom.padding;
    let wd = weights.data();
    let mut out = Tensor::zeros(os);
    let oplane = os.plane();

    for n in 0..is.n {
        for oc in 0..os.c {
            let start = (n * os.c + oc) * oplane;
            let dst = &mut out.data_mut()[start..start + oplane];
            if let Some(&b) = bias.get(oc) {
                dst.iter_mut().for_each(|v| *v = b);
            }
            for ic in 0..is.c {
                let src = input.plane(n, ic);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((oc * is.c + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..os.h {
                            let Some(iy) = ConvGeometry::source(oy, ky, sh, ph, is.h) else {
                                continue;
                            };
                            let row = &src[iy * is.w..(iy + 1) * is.w];
                            let drow = &mut dst[oy * os.w..(oy + 1) * os.w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                if let Some(ix) = ConvGeometry::source(ox, kx, sw, pw, is.w) {
                                    *d += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] (without bias): scatters each output cell back over its
/// receptive field.
///
/// `input` has the forward output's extents (`out_channels` channels); the result
/// has `in_channels` channels and spatial extents `in_hw`, which must be a size the
/// forward geometry maps onto `input`'s extents.
pub fn conv2d_transposed(input: &Tensor, kernel: &Tensor, geom: &ConvGeometry, in_hw: (usize, usize)) -> Result<Tensor> {
    let gs = input.shape();
    check_weights("conv2d_transposed", kernel, geom)?;
    check_channels("conv2d_transposed", "input channels", geom.out_channels, gs.c)?;
    let (eh, ew) = geom.output_hw(in_hw.0, in_hw.1)?;
    if (eh, ew) != (gs.h, gs.w) {
        return Err(Error::Geometry(format!(
            "a {}x{} input maps to {}x{}, not the given {}x{}",
            in_hw.0, in_hw.1, eh, ew, gs.h, gs.w
        )));
    }
    let os = Shape::new(gs.n, geom.in_channels, in_hw.0, in_hw.1);
    let [kh, kw] = geom.kernel;
    let [sh, sw] = geom.stride;
    let [ph, pw] = geom.padding;
    let wd = kernel.data();
    let mut out = Tensor::zeros(os);
    let oplane = os.plane();

    for n in 0..gs.n {
        for ic in 0..os.c {
            let start = (n * os.c + ic) * oplane;
            let dst = &mut out.data_mut()[start..start + oplane];
            for oc in 0..gs.c {
                let src = input.plane(n, oc);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((oc * os.c + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for gy in 0..gs.h {
                            let Some(iy) = ConvGeometry::source(gy, ky, sh, ph, os.h) else {
                                continue;
                            };
                            let row = &src[gy * gs.w..(gy + 1) * gs.w];
                            let drow = &mut dst[iy * os.w..(iy + 1) * os.w];
                            for (gx, &g) in row.iter().enumerate() {
                                if let Some(ix) = ConvGeometry::source(gx, kx, sw, pw, os.w) {
                                    drow[ix] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// All-ones single-channel kernel for `geom`'s window.
pub(crate) fn ones_kernel(geom: &ConvGeometry) -> Tensor {
    Tensor::full(Shape::new(1, 1, geom.kernel[0], geom.kernel[1]), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ones_kernel_on_ones_sums_to_nine() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, &[], &ConvGeometry::new(1, 1, 3, 1, 0)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 3), vec![1.0, -2.0, 3.0, 4.5, 0.0, -6.0]).unwrap();
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let y = conv2d(&x, &w, &[], &ConvGeometry::new(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::zeros(Shape::new(2, 1, 1, 1));
        let y = conv2d(&x, &w, &[0.5, -1.0], &ConvGeometry::new(1, 2, 1, 1, 0)).unwrap();
        assert_eq!(y.plane(0, 0), &[0.5; 4]);
        assert_eq!(y.plane(0, 1), &[-1.0; 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
        let err = conv2d(&x, &w, &[], &ConvGeometry::new(3, 1, 3, 1, 0)).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "conv2d",
                what: "input channels",
                expected: 3,
                actual: 2
            }
        );
    }

    #[test]
    fn geometry_output_formula() {
        let g = ConvGeometry::new(1, 1, 3, 2, 1);
        assert_eq!(g.output_hw(5, 6).unwrap(), (3, 3));
        assert!(ConvGeometry::new(1, 1, 5, 1, 0).output_hw(3, 3).is_err());
    }

    #[test]
    fn single_pixel_scatter_is_a_block_of_ones() {
        let geom = ConvGeometry::new(1, 1, 3, 1, 0);
        // forward 5x5 -> 3x3; a 1.0 at the centre output scatters over the middle 3x3
        let mut g = vec![0.0; 9];
        g[4] = 1.0;
        let g = Tensor::from_vec(Shape::new(1, 1, 3, 3), g).unwrap();
        let k = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let out = conv2d_transposed(&g, &k, &geom, (5, 5)).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                assert_eq!(out.at(0, 0, y, x), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn transposed_rejects_inconsistent_extent() {
        let geom = ConvGeometry::new(1, 1, 3, 1, 0);
        let g = Tensor::zeros(Shape::new(1, 1, 3, 3));
        let k = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        assert!(matches!(
            conv2d_transposed(&g, &k, &geom, (6, 6)),
            Err(Error::Geometry(_))
        ));
    }
}
