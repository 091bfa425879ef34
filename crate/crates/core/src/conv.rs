//! Float convolution kernels over lowered patches.

use crate::error::{geometry, Result};
use crate::lowering::{lower_with_pad, scatter_patches, ConvGeometry};
use crate::tensor::{Shape, Tensor};

/// Strided view of a row-major-ish matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * a.rs + (k - 1) * a.cs < a.data.len());
    debug_assert!(k == 0 || (k - 1) * b.rs + (n - 1) * b.cs < b.data.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: bounds of all three operands are checked above (debug) and
    // guaranteed by the callers' shape validation.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Checks `(x, w, groups)` compatibility and returns the output shape.
pub fn conv_output_shape(x: Shape, w: Shape, geom: &ConvGeometry, groups: usize) -> Result<Shape> {
    let [n, c, h, wd] = x;
    let [f, cg, kh, kw] = w;
    if groups == 0 || c % groups != 0 || f % groups != 0 {
        return Err(geometry(format!(
            "{} input channels / {} filters not divisible into {} groups",
            c, f, groups
        )));
    }
    if cg != c / groups || kh != geom.kh || kw != geom.kw {
        return Err(geometry(format!(
            "weight {:?} does not match input {:?} with {} groups and {}x{} kernel",
            w, x, groups, geom.kh, geom.kw
        )));
    }
    let (oh, ow) = geom.output_hw(h, wd)?;
    Ok([n, f, oh, ow])
}

/// Product of weights with lowered patches: result laid out as
/// `(F, N*Ho*Wo)`.
pub(crate) fn weights_times_patches(
    patches: &[f32],
    weights: &[f32],
    f: usize,
    cols: usize,
    rows: usize,
    groups: usize,
) -> Vec<f32> {
    let fg = f / groups;
    let kg = cols / groups;
    let mut tmp = vec![0.0; f * rows];
    for g in 0..groups {
        gemm(
            fg,
            kg,
            rows,
            MatRef {
                data: &weights[g * fg * kg..],
                rs: kg,
                cs: 1,
            },
            MatRef {
                data: &patches[g * kg..],
                rs: 1,
                cs: cols,
            },
            &mut tmp[g * fg * rows..],
            rows,
            1,
            0.0,
        );
    }
    tmp
}

/// `(F, N*P)` -> `(N, F, P)`.
pub(crate) fn fnp_to_nfp(tmp: &[f32], n: usize, f: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * f * p];
    for fi in 0..f {
        for ni in 0..n {
            let src = &tmp[fi * n * p + ni * p..fi * n * p + (ni + 1) * p];
            out[(ni * f + fi) * p..(ni * f + fi + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `(N, F, P)` -> `(F, N*P)`.
pub(crate) fn nfp_to_fnp(src: &[f32], n: usize, f: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0; n * f * p];
    for ni in 0..n {
        for fi in 0..f {
            out[fi * n * p + ni * p..fi * n * p + (ni + 1) * p]
                .copy_from_slice(&src[(ni * f + fi) * p..(ni * f + fi + 1) * p]);
        }
    }
    out
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeometry,
    groups: usize,
) -> Result<Tensor> {
    conv2d_forward_padded(x, w, geom, groups, 0.0)
}

pub(crate) fn conv2d_forward_padded(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeometry,
    groups: usize,
    pad_value: f32,
) -> Result<Tensor> {
    let out_shape = conv_output_shape(x.shape(), w.shape(), geom, groups)?;
    let [n, f, oh, ow] = out_shape;
    let (rows, cols, patches) = lower_with_pad(x, geom, pad_value)?;
    let tmp = weights_times_patches(&patches, w.data(), f, cols, rows, groups);
    Tensor::new(out_shape, fnp_to_nfp(&tmp, n, f, oh * ow))
}

/// Gradients of a float convolution. `pad_value` must match the forward.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeometry,
    groups: usize,
    pad_value: f32,
    grad_out: &Tensor,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let [n, f, oh, ow] = conv_output_shape(x.shape(), w.shape(), geom, groups)?;
    grad_out.expect_shape([n, f, oh, ow])?;
    let p = oh * ow;
    let rows = n * p;
    let dtmp = nfp_to_fnp(grad_out.data(), n, f, p);
    let fg = f / groups;
    let cols = x.shape()[1] * geom.taps();
    let kg = cols / groups;

    let dw = if need_w {
        let (_, _, patches) = lower_with_pad(x, geom, pad_value)?;
        let mut dw = vec![0.0; w.len()];
        for g in 0..groups {
            gemm(
                fg,
                rows,
                kg,
                MatRef {
                    data: &dtmp[g * fg * rows..],
                    rs: rows,
                    cs: 1,
                },
                MatRef {
                    data: &patches[g * kg..],
                    rs: cols,
                    cs: 1,
                },
                &mut dw[g * fg * kg..],
                kg,
                1,
                0.0,
            );
        }
        Some(Tensor::new(w.shape(), dw)?)
    } else {
        None
    };

    let dx = if need_x {
        let mut dpatches = vec![0.0; rows * cols];
        for g in 0..groups {
            gemm(
                rows,
                fg,
                kg,
                MatRef {
                    data: &dtmp[g * fg * rows..],
                    rs: 1,
                    cs: rows,
                },
                MatRef {
                    data: &w.data()[g * fg * kg..],
                    rs: kg,
                    cs: 1,
                },
                &mut dpatches[g * kg..],
                cols,
                1,
                0.0,
            );
        }
        Some(scatter_patches(&dpatches, x.shape(), geom)?)
    } else {
        None
    };
    Ok((dx, dw))
}
