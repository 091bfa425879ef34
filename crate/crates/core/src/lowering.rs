//! Convolution geometry and patch lowering (im2col).
//!
//! Float and binary convolutions share this lowering: every output position
//! becomes one row holding its receptive field, so the convolution reduces to
//! row dot products.

use crate::error::{contract, geometry, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(k: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        ConvGeometry {
            kh: k,
            kw: k,
            stride,
            dilation,
            padding,
        }
    }

    /// "Same" padding for odd kernels at the given dilation.
    pub fn same(k: usize, stride: usize, dilation: usize) -> Self {
        Self::new(k, stride, dilation, dilation * (k - 1) / 2)
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    /// Effective receptive field extent along (height, width).
    pub fn receptive_field(&self) -> (usize, usize) {
        (
            self.dilation * (self.kh - 1) + 1,
            self.dilation * (self.kw - 1) + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.kh == 0 || self.kw == 0 {
            return Err(contract(format!(
                "stride, dilation and kernel must be >= 1: {:?}",
                self
            )));
        }
        Ok(())
    }

    /// Output spatial dims for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (rh, rw) = self.receptive_field();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < rh || pw < rw {
            return Err(geometry(format!(
                "{}x{} input with padding {} is smaller than the {}x{} receptive field",
                h, w, self.padding, rh, rw
            )));
        }
        Ok(((ph - rh) / self.stride + 1, (pw - rw) / self.stride + 1))
    }
}

/// Lowers `x` into a patch matrix of shape `(1, 1, N*Ho*Wo, C*kh*kw)`.
///
/// Rows enumerate output positions in `(n, oh, ow)` order; columns enumerate
/// taps in `(c, ki, kj)` order, matching the `(F, C, kh, kw)` weight layout.
/// Out-of-bounds taps read zero.
pub fn lower_conv_patches(x: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (rows, cols, data) = lower_with_pad(x, geom, 0.0)?;
    Tensor::new([1, 1, rows, cols], data)
}

pub(crate) fn lower_with_pad(
    x: &Tensor,
    geom: &ConvGeometry,
    pad_value: f32,
) -> Result<(usize, usize, Vec<f32>)> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = geom.output_hw(h, w)?;
    let cols = c * geom.taps();
    let rows = n * oh * ow;
    let mut out = vec![pad_value; rows * cols];
    let src = x.data();
    let pad = geom.padding as isize;
    for ni in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                let row = (ni * oh + y) * ow + xo;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for ci in 0..c {
                    let plane = &src[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for ki in 0..geom.kh {
                        let iy = (y * geom.stride + ki * geom.dilation) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kj in 0..geom.kw {
                            let ix = (xo * geom.stride + kj * geom.dilation) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[(ci * geom.kh + ki) * geom.kw + kj] = plane[iy * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((rows, cols, out))
}

/// Adjoint of [`lower_with_pad`]: scatters patch-matrix gradients back onto
/// an input of `shape`, dropping padding taps.
pub(crate) fn scatter_patches(
    patch_grad: &[f32],
    shape: Shape,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    let [n, c, h, w] = shape;
    let (oh, ow) = geom.output_hw(h, w)?;
    let cols = c * geom.taps();
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    let pad = geom.padding as isize;
    for ni in 0..n {
        for y in 0..oh {
            for xo in 0..ow {
                let row = (ni * oh + y) * ow + xo;
                let src = &patch_grad[row * cols..(row + 1) * cols];
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for ki in 0..geom.kh {
                        let iy = (y * geom.stride + ki * geom.dilation) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..geom.kw {
                            let ix = (xo * geom.stride + kj * geom.dilation) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[base + iy as usize * w + ix as usize] +=
                                src[(ci * geom.kh + ki) * geom.kw + kj];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_keeps_size() {
        let g = ConvGeometry::new(3, 1, 1, 1);
        let x = Tensor::zeros([1, 1, 3, 3]);
        let p = lower_conv_patches(&x, &g).unwrap();
        assert_eq!(p.shape(), [1, 1, 9, 9]);
    }

    #[test]
    fn dilated_geometry() {
        let g = ConvGeometry::new(3, 1, 2, 2);
        assert_eq!(g.receptive_field(), (5, 5));
        let x = Tensor::zeros([1, 1, 8, 8]);
        let p = lower_conv_patches(&x, &g).unwrap();
        assert_eq!(p.shape()[2], 64);
    }

    #[test]
    fn too_small_input_is_rejected() {
        let g = ConvGeometry::new(5, 1, 1, 0);
        assert!(matches!(
            g.output_hw(3, 3),
            Err(crate::Error::InvalidGeometry(_))
        ));
        assert!(ConvGeometry::new(3, 0, 1, 1).output_hw(4, 4).is_err());
    }

    #[test]
    fn padding_taps_read_zero() {
        let g = ConvGeometry::new(3, 1, 1, 1);
        let x = Tensor::full([1, 1, 2, 2], 7.0);
        let p = lower_conv_patches(&x, &g).unwrap();
        // top-left output: only the lower-right 2x2 of the window is in bounds
        assert_eq!(&p.data()[..9], &[0., 0., 0., 0., 7., 7., 0., 7., 7.]);
    }
}
