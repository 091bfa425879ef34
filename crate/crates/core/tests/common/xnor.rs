//! Scalar float evaluation of `beta K . (sign(W) * sign(A))` and the random
//! configurations the packed kernel is compared on.

use bnas::binary::{binary_conv, ste_backward};
use bnas::lowering::ConvGeometry;
use bnas::Tensor;
use rand::Rng;

use super::{rel_err, rng, uniform};

pub const TOL: f64 = 1e-5;
pub const CONFIGS: usize = 200;

/// Scalar reference. Padding taps read `+1` for the sign and `0` for `|A|`.
pub fn reference(
    a: &Tensor,
    w: &Tensor,
    k: usize,
    stride: usize,
    dil: usize,
    groups: usize,
) -> Tensor {
    let [n, _, h, wd] = a.shape();
    let [f, cg, _, _] = w.shape();
    let pad = dil * (k - 1) / 2;
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let fg = f / groups;
    let sgn = |v: f32| if v >= 0.0 { 1.0f64 } else { -1.0 };
    let mut out = vec![0.0f32; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            let g = fi / fg;
            let beta: f64 = (0..cg * k * k)
                .map(|i| w.data()[fi * cg * k * k + i].abs() as f64)
                .sum::<f64>()
                / (cg * k * k) as f64;
            for y in 0..oh {
                for x in 0..ow {
                    let mut dot = 0.0f64;
                    let mut kacc = 0.0f64;
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = (y * stride + ki * dil) as isize - pad as isize;
                            let ix = (x * stride + kj * dil) as isize - pad as isize;
                            let inside =
                                iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd;
                            let mut mean_abs = 0.0f64;
                            for cl in 0..cg {
                                let wv = sgn(w.at(fi, cl, ki, kj));
                                let av = if inside {
                                    a.at(ni, g * cg + cl, iy as usize, ix as usize)
                                } else {
                                    1.0
                                };
                                dot += wv * sgn(av);
                                if inside {
                                    mean_abs += av.abs() as f64;
                                }
                            }
                            kacc += mean_abs / cg as f64;
                        }
                    }
                    let kval = kacc / (k * k) as f64;
                    out[((ni * f + fi) * oh + y) * ow + x] = (beta * kval * dot) as f32;
                }
            }
        }
    }
    Tensor::new([n, f, oh, ow], out).unwrap()
}

/// Worst relative error of the packed kernel over the random configurations;
/// every fifth case is depthwise.
pub fn worst_config_error() -> Result<f64, String> {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for case in 0..CONFIGS {
        let c = r.gen_range(1..=8);
        let h = r.gen_range(1..=8);
        let w = r.gen_range(1..=8);
        let k = if r.gen_bool(0.5) { 3 } else { 5 };
        let dil = r.gen_range(1..=2);
        let stride = r.gen_range(1..=2);
        let groups = if case % 5 == 0 { c } else { 1 };
        let f = if groups == 1 { r.gen_range(1..=8) } else { c };
        let batch = r.gen_range(1..=2);
        let a = uniform(&mut r, [batch, c, h, w], 2.0);
        let wt = uniform(&mut r, [f, c / groups, k, k], 1.0);
        let geom = ConvGeometry::same(k, stride, dil);
        let got = binary_conv(&a, &wt, &geom, groups)
            .map_err(|e| format!("case {case}: {e}"))?
            .out;
        let want = reference(&a, &wt, k, stride, dil, groups);
        if got.shape() != want.shape() {
            return Err(format!(
                "case {case}: shape {:?} vs {:?}",
                got.shape(),
                want.shape()
            ));
        }
        let e = rel_err(got.data(), want.data());
        if e > TOL {
            return Err(format!(
                "case {case}: c={c} h={h} w={w} k={k} d={dil} s={stride} g={groups} err={e:.3e}"
            ));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Count of elements where the STE backward differs bitwise from
/// `grad * 1[|x| <= 1]`, over random tensors that include both clip edges.
pub fn ste_mismatches() -> usize {
    let mut r = rng(3);
    let mut bad = 0;
    for _ in 0..50 {
        let g = uniform(&mut r, [2, 3, 4, 4], 5.0);
        let mut x = uniform(&mut r, [2, 3, 4, 4], 2.0);
        x.data_mut()[0] = 1.0;
        x.data_mut()[1] = -1.0;
        let got = ste_backward(&g, &x).unwrap();
        for i in 0..g.data().len() {
            let want = if x.data()[i].abs() <= 1.0 {
                g.data()[i]
            } else {
                0.0
            };
            bad += (got.data()[i].to_bits() != want.to_bits()) as usize;
        }
    }
    bad
}
