//! XNOR-style binarized convolution.
//!
//! A float convolution `W * A` is approximated by `beta K . (B * I)` with
//! `B = sign(W)`, `I = sign(A)`, a per-filter weight scale `beta = |W|_1 / n`
//! and an activation scale map `K` obtained by averaging the channel-mean of
//! `|A|` over each receptive field. The `B * I` core runs on packed bits.
//!
//! Backward uses the straight-through estimator: the sign function passes
//! gradients where `|x| <= 1` and blocks them elsewhere. `beta` and `K` are
//! treated as constants.

use crate::bits::{pack_signs, xnor_dot_unchecked, BitTensor};
use crate::conv::{conv2d_backward, conv_output_shape};
use crate::error::{contract, Error, Result};
use crate::lowering::ConvGeometry;
use crate::tensor::{Shape, Tensor};

/// Straight-through clip threshold (inclusive).
pub const STE_CLIP: f32 = 1.0;

/// Per-filter scale: mean absolute value of each output filter.
pub fn filter_scales(w: &Tensor) -> Vec<f32> {
    let per = w.item_len();
    w.data()
        .chunks(per.max(1))
        .map(|f| (f.iter().map(|v| v.abs() as f64).sum::<f64>() / per as f64) as f32)
        .collect()
}

/// `(B, beta)` for a weight tensor of shape `(C_out, C_in, kh, kw)`.
pub fn binarize_weights(w: &Tensor) -> (BitTensor, Vec<f32>) {
    (pack_signs(w), filter_scales(w))
}

/// Activation scale map `K`, shape `(N, groups, Ho, Wo)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationScaleMap {
    pub k: Tensor,
}

/// `K` for an ungrouped convolution with the given geometry.
pub fn activation_scale(a: &Tensor, geom: &ConvGeometry) -> Result<ActivationScaleMap> {
    activation_scale_grouped(a, geom, 1)
}

/// `K` where `D` is the mean of `|A|` over the channels of each group.
pub fn activation_scale_grouped(
    a: &Tensor,
    geom: &ConvGeometry,
    groups: usize,
) -> Result<ActivationScaleMap> {
    let [n, c, h, w] = a.shape();
    if groups == 0 || c % groups != 0 {
        return Err(contract(format!(
            "{} channels cannot form {} groups",
            c, groups
        )));
    }
    let (oh, ow) = geom.output_hw(h, w)?;
    let cg = c / groups;
    let mut d = vec![0.0f32; n * groups * h * w];
    for ni in 0..n {
        for g in 0..groups {
            let dst = &mut d[(ni * groups + g) * h * w..(ni * groups + g + 1) * h * w];
            for cl in 0..cg {
                let ci = g * cg + cl;
                let src = &a.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += v.abs();
                }
            }
            for o in dst.iter_mut() {
                *o /= cg as f32;
            }
        }
    }
    let taps = geom.taps() as f32;
    let pad = geom.padding as isize;
    let mut k = Tensor::zeros([n, groups, oh, ow]);
    let kd = k.data_mut();
    for plane in 0..n * groups {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f32;
                for ki in 0..geom.kh {
                    let iy = (y * geom.stride + ki * geom.dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..geom.kw {
                        let ix = (x * geom.stride + kj * geom.dilation) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += src[iy as usize * w + ix as usize];
                    }
                }
                kd[(plane * oh + y) * ow + x] = acc / taps;
            }
        }
    }
    Ok(ActivationScaleMap { k })
}

/// A binarized convolution layer holding float master weights.
///
/// `B` and `beta` are derived from the master weights on every forward.
#[derive(Clone, Debug)]
pub struct BinConvLayer {
    pub weight: Tensor,
    pub geom: ConvGeometry,
    pub groups: usize,
}

impl BinConvLayer {
    pub fn new(weight: Tensor, geom: ConvGeometry, groups: usize) -> Self {
        BinConvLayer {
            weight,
            geom,
            groups,
        }
    }

    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        Ok(binary_conv(a, &self.weight, &self.geom, self.groups)?.out)
    }
}

/// Forward result with the scale factors needed by backward.
#[derive(Clone, Debug)]
pub struct BinaryConvOutput {
    pub out: Tensor,
    pub k: Tensor,
    pub beta: Vec<f32>,
}

/// `beta K . (B * sign(A))` for the (already batch-normalized) activation `A`.
pub fn binary_conv_forward(a: &Tensor, layer: &BinConvLayer) -> Result<Tensor> {
    layer.forward(a)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite(format!("{} contains NaN or Inf", what)));
    }
    Ok(())
}

/// Packs filters into rows of `Cg*kh*kw` bits, taps in `(ki, kj, c)` order.
fn pack_filter_rows(w: &Tensor) -> BitTensor {
    let [f, cg, kh, kw] = w.shape();
    let bits = cg * kh * kw;
    let mut b = BitTensor::negative_ones([1, 1, f, bits]);
    for fi in 0..f {
        for cl in 0..cg {
            for ki in 0..kh {
                for kj in 0..kw {
                    if w.at(fi, cl, ki, kj) >= 0.0 {
                        b.set(fi, (ki * kw + kj) * cg + cl, true);
                    }
                }
            }
        }
    }
    b
}

/// Lowers `sign(A)` of one batch item and one group into packed patch rows
/// (taps in `(ki, kj, c)` order). Padding taps are `+1`.
fn pack_patch_rows(
    signs_hwc: &[bool],
    hw: (usize, usize),
    c: usize,
    group: (usize, usize),
    geom: &ConvGeometry,
    out_hw: (usize, usize),
) -> BitTensor {
    let (h, w) = hw;
    let (g, cg) = group;
    let (oh, ow) = out_hw;
    let bits = cg * geom.taps();
    let mut rows = BitTensor::negative_ones([1, 1, oh * ow, bits]);
    let pad = geom.padding as isize;
    for y in 0..oh {
        for x in 0..ow {
            let r = y * ow + x;
            for ki in 0..geom.kh {
                let iy = (y * geom.stride + ki * geom.dilation) as isize - pad;
                for kj in 0..geom.kw {
                    let ix = (x * geom.stride + kj * geom.dilation) as isize - pad;
                    let base = (ki * geom.kw + kj) * cg;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        for cl in 0..cg {
                            rows.set(r, base + cl, true);
                        }
                        continue;
                    }
                    let pix = &signs_hwc[(iy as usize * w + ix as usize) * c + g * cg..];
                    for cl in 0..cg {
                        if pix[cl] {
                            rows.set(r, base + cl, true);
                        }
                    }
                }
            }
        }
    }
    rows
}

/// Bit-packed binary convolution with scale factors.
pub fn binary_conv(
    a: &Tensor,
    w: &Tensor,
    geom: &ConvGeometry,
    groups: usize,
) -> Result<BinaryConvOutput> {
    let out_shape = conv_output_shape(a.shape(), w.shape(), geom, groups)?;
    check_finite(a, "binary conv input")?;
    check_finite(w, "binary conv weights")?;
    let [n, c, h, wd] = a.shape();
    let [_, f, oh, ow] = out_shape;
    let cg = c / groups;
    let fg = f / groups;
    let nbits = cg * geom.taps();
    let beta = filter_scales(w);
    let k = activation_scale_grouped(a, geom, groups)?.k;
    let filters = pack_filter_rows(w);

    let mut out = Tensor::zeros(out_shape);
    let p = oh * ow;
    let mut signs = vec![false; h * wd * c];
    for ni in 0..n {
        for ci in 0..c {
            for (i, v) in a.data()[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd]
                .iter()
                .enumerate()
            {
                signs[i * c + ci] = *v >= 0.0;
            }
        }
        for g in 0..groups {
            let patches = pack_patch_rows(&signs, (h, wd), c, (g, cg), geom, (oh, ow));
            let kplane = &k.data()[(ni * groups + g) * p..(ni * groups + g + 1) * p];
            for fl in 0..fg {
                let fi = g * fg + fl;
                let frow = filters.row(fi);
                let dst = &mut out.data_mut()[(ni * f + fi) * p..(ni * f + fi + 1) * p];
                for (pos, o) in dst.iter_mut().enumerate() {
                    let dot = xnor_dot_unchecked(patches.row(pos), frow, nbits);
                    *o = beta[fi] * kplane[pos] * dot as f32;
                }
            }
        }
    }
    Ok(BinaryConvOutput { out, k, beta })
}

/// Clipped-identity gradient of `sign`: `grad_out . 1[|pre_sign| <= 1]`.
pub fn ste_backward(grad_out: &Tensor, pre_sign: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(pre_sign, |g, x| if x.abs() <= STE_CLIP { g } else { 0.0 })
}

/// Expands per-filter `beta` and per-group `K` into a full output-shaped
/// scale tensor.
pub(crate) fn scale_tensor(out_shape: Shape, beta: &[f32], k: &Tensor) -> Tensor {
    let [n, f, oh, ow] = out_shape;
    let groups = k.shape()[1];
    let fg = f / groups;
    let p = oh * ow;
    let mut s = Tensor::zeros(out_shape);
    let sd = s.data_mut();
    for ni in 0..n {
        for fi in 0..f {
            let kp = &k.data()[(ni * groups + fi / fg) * p..(ni * groups + fi / fg + 1) * p];
            for (j, kv) in kp.iter().enumerate() {
                sd[(ni * f + fi) * p + j] = beta[fi] * kv;
            }
        }
    }
    s
}

/// STE gradients of [`binary_conv`] with respect to the float activation and
/// the float master weights.
#[allow(clippy::too_many_arguments)]
pub fn binary_conv_backward(
    a: &Tensor,
    w: &Tensor,
    geom: &ConvGeometry,
    groups: usize,
    fwd: &BinaryConvOutput,
    grad_out: &Tensor,
    need_a: bool,
    need_w: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let scale = scale_tensor(grad_out.shape(), &fwd.beta, &fwd.k);
    let scaled = grad_out.zip_map(&scale, |g, s| g * s)?;
    let (di, db) = conv2d_backward(
        &a.sign(),
        &w.sign(),
        geom,
        groups,
        1.0,
        &scaled,
        need_a,
        need_w,
    )?;
    let da = di.map(|d| ste_backward(&d, a)).transpose()?;
    let dw = db.map(|d| ste_backward(&d, w)).transpose()?;
    Ok((da, dw))
}

/// Binarized depthwise-separable convolution: a depthwise binary conv whose
/// scaled output is re-binarized and fed to a 1x1 binary conv. Analysis only.
pub fn binary_separable_conv(
    a: &Tensor,
    depthwise: &Tensor,
    pointwise: &Tensor,
    geom: &ConvGeometry,
) -> Result<Tensor> {
    let c = a.shape()[1];
    if depthwise.shape()[0] != c || depthwise.shape()[1] != 1 {
        return Err(contract(format!(
            "depthwise weights {:?} must be ({}, 1, k, k)",
            depthwise.shape(),
            c
        )));
    }
    if pointwise.shape()[2] != 1 || pointwise.shape()[3] != 1 {
        return Err(contract(format!(
            "pointwise weights {:?} must be 1x1",
            pointwise.shape()
        )));
    }
    let mid = binary_conv(a, depthwise, geom, c)?.out;
    Ok(binary_conv(&mid, pointwise, &ConvGeometry::new(1, 1, 1, 0), 1)?.out)
}
