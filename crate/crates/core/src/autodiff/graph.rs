//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and backward is a single reverse sweep.

use std::collections::HashMap;

use crate::binary::{binary_conv, binary_conv_backward, BinaryConvOutput};
use crate::conv::{conv2d_backward, conv2d_forward};
use crate::error::{contract, geometry, Error, Result};
use crate::lowering::ConvGeometry;
use crate::tensor::{Shape, Tensor};

use super::param::{ParamId, ParamStore};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        geom: ConvGeometry,
        groups: usize,
    },
    BinConv {
        geom: ConvGeometry,
        groups: usize,
        fwd: Box<BinaryConvOutput>,
    },
    Linear,
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f32>,
        train: bool,
    },
    Relu,
    MaxPool {
        argmax: Vec<usize>,
    },
    AvgPool {
        geom: ConvGeometry,
    },
    GlobalAvgPool,
    Concat,
    LinComb {
        coeffs: Vec<f32>,
    },
    Mul,
    Sum,
    RowSoftmax,
    Entropy,
    MixedSum {
        row: usize,
    },
    SoftmaxXent {
        labels: Vec<usize>,
        probs: Tensor,
    },
    ChannelPad,
    Reshape,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Running-statistics update produced by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub store: u64,
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    leaves: HashMap<(u64, ParamId), Var>,
    stat_updates: Vec<StatUpdate>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite(format!("{what} produced NaN or Inf")));
    }
    Ok(())
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl Graph {
    pub fn new(train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            train,
            leaves: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Branch taken by every piecewise-linear node in build order: the active
    /// mask of each ReLU and the winning tap of each max pool. Two graphs of
    /// the same structure with equal patterns are in the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    let x = self.value(node.inputs[0]);
                    out.extend(x.data().iter().map(|v| (*v > 0.0) as usize));
                }
                Op::MaxPool { argmax } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Result<Var> {
        ensure_finite(&value, op_name(&op))?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that may or may not receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (never differentiated).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the same node
    /// so fan-out gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.leaves.get(&(store.tag(), id)) {
            return *v;
        }
        let p = store.get(id);
        let rg = store.requires_grad() && p.kind.trainable();
        let v = self.leaf(p.value.clone(), rg);
        self.leaves.insert((store.tag(), id), v);
        v
    }

    /// Nodes bound to parameters of the given store.
    pub fn param_leaves(&self, store_tag: u64) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.leaves
            .iter()
            .filter(move |((t, _), _)| *t == store_tag)
            .map(|((_, id), v)| (*id, *v))
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry, groups: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), &geom, groups)?;
        self.push(out, Op::Conv { geom, groups }, vec![x, w])
    }

    /// Binarized convolution of the (already normalized) activation `a`.
    pub fn bin_conv2d(&mut self, a: Var, w: Var, geom: ConvGeometry, groups: usize) -> Result<Var> {
        let fwd = binary_conv(self.value(a), self.value(w), &geom, groups)?;
        let out = fwd.out.clone();
        self.push(
            out,
            Op::BinConv {
                geom,
                groups,
                fwd: Box::new(fwd),
            },
            vec![a, w],
        )
    }

    /// `x (N, F, 1, 1) -> (N, O, 1, 1)` with weights `(O, F, 1, 1)` and bias
    /// `(1, O, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, f, xh, xw] = self.shape(x);
        let [o, wf, _, _] = self.shape(w);
        if xh != 1 || xw != 1 || wf != f || self.shape(b) != [1, o, 1, 1] {
            return Err(geometry(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let mut out = vec![0.0f32; n * o];
        for r in 0..n {
            out[r * o..(r + 1) * o].copy_from_slice(bs);
        }
        crate::conv::gemm(
            n,
            f,
            o,
            crate::conv::MatRef {
                data: xs,
                rs: f,
                cs: 1,
            },
            crate::conv::MatRef {
                data: ws,
                rs: 1,
                cs: f,
            },
            &mut out,
            o,
            1,
            1.0,
        );
        self.push(Tensor::new([n, o, 1, 1], out)?, Op::Linear, vec![x, w, b])
    }

    /// Batchnorm over `(N, H, W)` per channel. In training mode the batch
    /// statistics are used and an update for the running statistics is
    /// returned; in eval mode the running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<(Var, Option<(Vec<f32>, Vec<f32>)>)> {
        let [n, c, h, w] = self.shape(x);
        for v in [gamma, beta] {
            if self.shape(v) != [1, c, 1, 1] {
                return Err(geometry(format!(
                    "batchnorm over {} channels got affine parameter {:?}",
                    c,
                    self.shape(v)
                )));
            }
        }
        let p = h * w;
        let m = (n * p) as f64;
        let xs = self.value(x).data();
        let (mean, var, update) = if self.train {
            if n * p < 2 {
                return Err(contract(
                    "training batchnorm needs at least 2 values per channel",
                ));
            }
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            let mut unbiased = vec![0.0f32; c];
            for ci in 0..c {
                let mut s = 0.0f64;
                for ni in 0..n {
                    s += xs[(ni * c + ci) * p..(ni * c + ci + 1) * p]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0f64;
                for ni in 0..n {
                    ss += xs[(ni * c + ci) * p..(ni * c + ci + 1) * p]
                        .iter()
                        .map(|&v| (v as f64 - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ci] = mu as f32;
                var[ci] = (ss / m) as f32;
                unbiased[ci] = (ss / (m - 1.0)) as f32;
            }
            (mean.clone(), var, Some((mean, unbiased)))
        } else {
            (
                running_mean.data().to_vec(),
                running_var.data().to_vec(),
                None,
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = Tensor::zeros([n, c, h, w]);
        let mut out = Tensor::zeros([n, c, h, w]);
        {
            let xh = xhat.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let r = (ni * c + ci) * p..(ni * c + ci + 1) * p;
                    for i in r {
                        xh[i] = (xs[i] - mean[ci]) * inv_std[ci];
                    }
                }
            }
        }
        {
            let xh = xhat.data();
            let o = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    for i in (ni * c + ci) * p..(ni * c + ci + 1) * p {
                        o[i] = gs[ci] * xh[i] + bs[ci];
                    }
                }
            }
        }
        let train = self.train;
        let v = self.push(
            out,
            Op::BatchNorm {
                xhat,
                inv_std,
                train,
            },
            vec![x, gamma, beta],
        )?;
        Ok((v, update))
    }

    /// Batchnorm whose running statistics live in `store`; training-mode
    /// updates are queued on the graph.
    pub fn batch_norm_param(
        &mut self,
        store: &ParamStore,
        x: Var,
        ids: [ParamId; 4],
    ) -> Result<Var> {
        let [gamma, beta, mean, var] = ids;
        let g = self.param(store, gamma);
        let b = self.param(store, beta);
        let (out, upd) = self.batch_norm(x, g, b, store.value(mean), store.value(var))?;
        if let Some((bm, bv)) = upd {
            self.stat_updates.push(StatUpdate {
                store: store.tag(),
                mean,
                var,
                batch_mean: bm,
                batch_var: bv,
            });
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu, vec![x])
    }

    /// Max pooling; padded taps never win.
    pub fn max_pool(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = geom.output_hw(h, w)?;
        let xs = self.value(x).data();
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let pad = geom.padding as isize;
        for plane in 0..n * c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = usize::MAX;
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
                            let i = plane * h * w + iy as usize * w + ix as usize;
                            if xs[i] > best {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    if best_i == usize::MAX {
                        return Err(geometry("max pool window lies entirely in padding"));
                    }
                    let o = (plane * oh + y) * ow + xo;
                    out.data_mut()[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        self.push(out, Op::MaxPool { argmax }, vec![x])
    }

    /// Average pooling over in-bounds taps only (padding excluded from the
    /// divisor).
    pub fn avg_pool(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = geom.output_hw(h, w)?;
        let xs = self.value(x).data();
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let od = out.data_mut();
        for plane in 0..n * c {
            for y in 0..oh {
                for xo in 0..ow {
                    let (s, cnt) = pool_window(&geom, (h, w), (y, xo))
                        .fold((0.0f32, 0usize), |(s, k), (iy, ix)| {
                            (s + xs[plane * h * w + iy * w + ix], k + 1)
                        });
                    od[(plane * oh + y) * ow + xo] = s / cnt.max(1) as f32;
                }
            }
        }
        self.push(out, Op::AvgPool { geom }, vec![x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let p = h * w;
        let xs = self.value(x).data();
        let data = (0..n * c)
            .map(|i| {
                (xs[i * p..(i + 1) * p]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / p as f64) as f32
            })
            .collect();
        self.push(Tensor::new([n, c, 1, 1], data)?, Op::GlobalAvgPool, vec![x])
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| contract("concat of nothing"))?;
        let [n, _, h, w] = self.shape(first);
        let mut total = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.shape(v);
            if (vn, vh, vw) != (n, h, w) {
                return Err(geometry(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(v)
                )));
            }
            total += vc;
        }
        let p = h * w;
        let mut out = Tensor::zeros([n, total, h, w]);
        let od = out.data_mut();
        for ni in 0..n {
            let mut off = 0;
            for &v in xs {
                let vc = self.shape(v)[1];
                let src = &self.value(v).data()[ni * vc * p..(ni + 1) * vc * p];
                od[(ni * total + off) * p..(ni * total + off + vc) * p].copy_from_slice(src);
                off += vc;
            }
        }
        self.push(out, Op::Concat, xs.to_vec())
    }

    /// `sum_i coeffs[i] * xs[i]` over equally shaped inputs.
    pub fn lin_comb(&mut self, xs: &[Var], coeffs: &[f32]) -> Result<Var> {
        if xs.is_empty() || xs.len() != coeffs.len() {
            return Err(contract("lin_comb needs one coefficient per input"));
        }
        let shape = self.shape(xs[0]);
        let mut out = Tensor::zeros(shape);
        for (&v, &c) in xs.iter().zip(coeffs) {
            if self.shape(v) != shape {
                return Err(geometry(format!("add: {:?} vs {:?}", shape, self.shape(v))));
            }
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        self.push(
            out,
            Op::LinComb {
                coeffs: coeffs.to_vec(),
            },
            xs.to_vec(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[a, b], &[1.0, 1.0])
    }

    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let ones = vec![1.0; xs.len()];
        self.lin_comb(xs, &ones)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul, vec![a, b])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum, vec![x])
    }

    /// Softmax along axis 1 of an `(R, K, 1, 1)` table.
    pub fn row_softmax(&mut self, alpha: Var) -> Result<Var> {
        let [r, k, h, w] = self.shape(alpha);
        if h != 1 || w != 1 {
            return Err(geometry("row_softmax expects an (R, K, 1, 1) table"));
        }
        let a = self.value(alpha).data();
        let mut out = vec![0.0f32; r * k];
        for ri in 0..r {
            let row = &a[ri * k..(ri + 1) * k];
            let m = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let e: Vec<f64> = row.iter().map(|&v| ((v - m) as f64).exp()).collect();
            let z: f64 = e.iter().sum();
            for (o, ev) in out[ri * k..(ri + 1) * k].iter_mut().zip(e) {
                *o = (ev / z) as f32;
            }
        }
        self.push(Tensor::new([r, k, 1, 1], out)?, Op::RowSoftmax, vec![alpha])
    }

    /// Total Shannon entropy (nats) of the rows of a probability table.
    pub fn entropy(&mut self, probs: Var) -> Result<Var> {
        let h: f64 = self
            .value(probs)
            .data()
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    -(p as f64) * (p as f64).ln()
                } else {
                    0.0
                }
            })
            .sum();
        self.push(Tensor::scalar(h as f32), Op::Entropy, vec![probs])
    }

    /// `sum_o probs[row, o] * xs[o]`.
    pub fn mixed_sum(&mut self, probs: Var, row: usize, xs: &[Var]) -> Result<Var> {
        let [r, k, _, _] = self.shape(probs);
        if row >= r || xs.len() != k {
            return Err(contract(format!(
                "mixed sum over {} ops with a ({} x {}) table row {}",
                xs.len(),
                r,
                k,
                row
            )));
        }
        let shape = self.shape(xs[0]);
        let pr = &self.value(probs).data()[row * k..(row + 1) * k];
        let mut out = Tensor::zeros(shape);
        for (&v, &p) in xs.iter().zip(pr) {
            if self.shape(v) != shape {
                return Err(geometry(format!(
                    "mixed edge op output {:?} differs from {:?}",
                    self.shape(v),
                    shape
                )));
            }
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += p * x;
            }
        }
        let mut inputs = vec![probs];
        inputs.extend_from_slice(xs);
        self.push(out, Op::MixedSum { row }, inputs)
    }

    /// Mean softmax cross-entropy of `(N, K, 1, 1)` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k, h, w] = self.shape(logits);
        if h != 1 || w != 1 || labels.len() != n {
            return Err(geometry(format!(
                "cross entropy: logits {:?} with {} labels",
                self.shape(logits),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(contract(format!(
                "label {} out of range for {} classes",
                bad, k
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            loss += s.ln() + m - row[labels[i]] as f64;
            for j in 0..k {
                probs[i * k + j] = (e[j] / s) as f32;
            }
        }
        self.push(
            Tensor::scalar((loss / n as f64) as f32),
            Op::SoftmaxXent {
                labels: labels.to_vec(),
                probs: Tensor::new([n, k, 1, 1], probs)?,
            },
            vec![logits],
        )
    }

    /// Zero-extends the channel axis to `channels`.
    pub fn channel_pad(&mut self, x: Var, channels: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if channels < c {
            return Err(geometry(format!(
                "cannot pad {} channels down to {}",
                c, channels
            )));
        }
        let p = c * h * w;
        let q = channels * h * w;
        let mut out = Tensor::zeros([n, channels, h, w]);
        for ni in 0..n {
            out.data_mut()[ni * q..ni * q + p]
                .copy_from_slice(&self.value(x).data()[ni * p..(ni + 1) * p]);
        }
        self.push(out, Op::ChannelPad, vec![x])
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape, vec![x])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(contract("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let input_grads = self.node_backward(node, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    if self.nodes[inp.0].requires_grad {
                        add_into(&mut grads[inp.0], ig)?;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let inp = &node.inputs;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv { geom, groups } => {
                let (dx, dw) = conv2d_backward(
                    self.value(inp[0]),
                    self.value(inp[1]),
                    geom,
                    *groups,
                    0.0,
                    g,
                    self.needs(inp[0]),
                    self.needs(inp[1]),
                )?;
                vec![dx, dw]
            }
            Op::BinConv { geom, groups, fwd } => {
                let (da, dw) = binary_conv_backward(
                    self.value(inp[0]),
                    self.value(inp[1]),
                    geom,
                    *groups,
                    fwd,
                    g,
                    self.needs(inp[0]),
                    self.needs(inp[1]),
                )?;
                vec![da, dw]
            }
            Op::Linear => {
                let x = self.value(inp[0]);
                let w = self.value(inp[1]);
                let [n, f, _, _] = x.shape();
                let o = w.shape()[0];
                let gd = g.data();
                let dx = if self.needs(inp[0]) {
                    let mut dx = vec![0.0; n * f];
                    crate::conv::gemm(
                        n,
                        o,
                        f,
                        crate::conv::MatRef {
                            data: gd,
                            rs: o,
                            cs: 1,
                        },
                        crate::conv::MatRef {
                            data: w.data(),
                            rs: f,
                            cs: 1,
                        },
                        &mut dx,
                        f,
                        1,
                        0.0,
                    );
                    Some(Tensor::new(x.shape(), dx)?)
                } else {
                    None
                };
                let dw = if self.needs(inp[1]) {
                    let mut dw = vec![0.0; o * f];
                    crate::conv::gemm(
                        o,
                        n,
                        f,
                        crate::conv::MatRef {
                            data: gd,
                            rs: 1,
                            cs: o,
                        },
                        crate::conv::MatRef {
                            data: x.data(),
                            rs: f,
                            cs: 1,
                        },
                        &mut dw,
                        f,
                        1,
                        0.0,
                    );
                    Some(Tensor::new(w.shape(), dw)?)
                } else {
                    None
                };
                let db = if self.needs(inp[2]) {
                    let mut db = vec![0.0f32; o];
                    for r in 0..n {
                        for j in 0..o {
                            db[j] += gd[r * o + j];
                        }
                    }
                    Some(Tensor::new([1, o, 1, 1], db)?)
                } else {
                    None
                };
                vec![dx, dw, db]
            }
            Op::BatchNorm {
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = xhat.shape();
                let p = h * w;
                let m = (n * p) as f64;
                let gamma = self.value(inp[1]).data();
                let gd = g.data();
                let xh = xhat.data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in (ni * c + ci) * p..(ni * c + ci + 1) * p {
                            sum_g[ci] += gd[i] as f64;
                            sum_gx[ci] += gd[i] as f64 * xh[i] as f64;
                        }
                    }
                }
                let dx = if self.needs(inp[0]) {
                    let mut dx = Tensor::zeros(xhat.shape());
                    let d = dx.data_mut();
                    for ni in 0..n {
                        for ci in 0..c {
                            let s = gamma[ci] * inv_std[ci];
                            for i in (ni * c + ci) * p..(ni * c + ci + 1) * p {
                                d[i] = if *train {
                                    (s as f64
                                        * (gd[i] as f64
                                            - sum_g[ci] / m
                                            - xh[i] as f64 * sum_gx[ci] / m))
                                        as f32
                                } else {
                                    s * gd[i]
                                };
                            }
                        }
                    }
                    Some(dx)
                } else {
                    None
                };
                let dgamma = self.needs(inp[1]).then(|| {
                    Tensor::new([1, c, 1, 1], sum_gx.iter().map(|&v| v as f32).collect())
                        .expect("shape")
                });
                let dbeta = self.needs(inp[2]).then(|| {
                    Tensor::new([1, c, 1, 1], sum_g.iter().map(|&v| v as f32).collect())
                        .expect("shape")
                });
                vec![dx, dgamma, dbeta]
            }
            Op::Relu => {
                let x = self.value(inp[0]);
                vec![Some(
                    g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?,
                )]
            }
            Op::MaxPool { argmax } => {
                let mut dx = Tensor::zeros(self.shape(inp[0]));
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                vec![Some(dx)]
            }
            Op::AvgPool { geom } => {
                let [n, c, h, w] = self.shape(inp[0]);
                let [_, _, oh, ow] = g.shape();
                let mut dx = Tensor::zeros([n, c, h, w]);
                let dd = dx.data_mut();
                for plane in 0..n * c {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let cnt = pool_window(geom, (h, w), (y, xo)).count().max(1);
                            let gv = g.data()[(plane * oh + y) * ow + xo] / cnt as f32;
                            for (iy, ix) in pool_window(geom, (h, w), (y, xo)) {
                                dd[plane * h * w + iy * w + ix] += gv;
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::GlobalAvgPool => {
                let shape = self.shape(inp[0]);
                let p = shape[2] * shape[3];
                let mut dx = Tensor::zeros(shape);
                for (i, chunk) in dx.data_mut().chunks_mut(p).enumerate() {
                    let v = g.data()[i] / p as f32;
                    chunk.iter_mut().for_each(|d| *d = v);
                }
                vec![Some(dx)]
            }
            Op::Concat => {
                let [n, total, h, w] = g.shape();
                let p = h * w;
                let mut off = 0;
                let mut out = Vec::with_capacity(inp.len());
                for &v in inp {
                    let vc = self.shape(v)[1];
                    if self.needs(v) {
                        let mut d = Tensor::zeros([n, vc, h, w]);
                        for ni in 0..n {
                            d.data_mut()[ni * vc * p..(ni + 1) * vc * p].copy_from_slice(
                                &g.data()[(ni * total + off) * p..(ni * total + off + vc) * p],
                            );
                        }
                        out.push(Some(d));
                    } else {
                        out.push(None);
                    }
                    off += vc;
                }
                out
            }
            Op::LinComb { coeffs } => inp
                .iter()
                .zip(coeffs)
                .map(|(&v, &c)| self.needs(v).then(|| g.map(|x| x * c)))
                .collect(),
            Op::Mul => {
                let a = self.value(inp[0]);
                let b = self.value(inp[1]);
                vec![
                    self.needs(inp[0])
                        .then(|| g.zip_map(b, |x, y| x * y))
                        .transpose()?,
                    self.needs(inp[1])
                        .then(|| g.zip_map(a, |x, y| x * y))
                        .transpose()?,
                ]
            }
            Op::Sum => {
                vec![Some(Tensor::full(self.shape(inp[0]), g.data()[0]))]
            }
            Op::RowSoftmax => {
                let p = &node.value;
                let [r, k, _, _] = p.shape();
                let mut d = Tensor::zeros(p.shape());
                for ri in 0..r {
                    let pr = &p.data()[ri * k..(ri + 1) * k];
                    let gr = &g.data()[ri * k..(ri + 1) * k];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| *a as f64 * *b as f64).sum();
                    for j in 0..k {
                        d.data_mut()[ri * k + j] = (pr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                    }
                }
                vec![Some(d)]
            }
            Op::Entropy => {
                let gv = g.data()[0];
                let p = self.value(inp[0]);
                vec![Some(p.map(|pv| {
                    let lp = (pv.max(f32::MIN_POSITIVE) as f64).ln();
                    (-(lp + 1.0) * gv as f64) as f32
                }))]
            }
            Op::MixedSum { row } => {
                let probs = self.value(inp[0]);
                let k = probs.shape()[1];
                let pr = &probs.data()[row * k..(row + 1) * k];
                let mut out = Vec::with_capacity(inp.len());
                if self.needs(inp[0]) {
                    let mut dp = Tensor::zeros(probs.shape());
                    for (o, &v) in inp[1..].iter().enumerate() {
                        dp.data_mut()[row * k + o] = g.dot(self.value(v))? as f32;
                    }
                    out.push(Some(dp));
                } else {
                    out.push(None);
                }
                for (&v, &p) in inp[1..].iter().zip(pr) {
                    out.push(self.needs(v).then(|| g.map(|x| x * p)));
                }
                out
            }
            Op::SoftmaxXent { labels, probs } => {
                let n = labels.len();
                let k = probs.shape()[1];
                let scale = g.data()[0] / n as f32;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * k + l] -= 1.0;
                }
                d.scale_assign(scale);
                vec![Some(d)]
            }
            Op::ChannelPad => {
                let [n, c, h, w] = self.shape(inp[0]);
                let total = g.shape()[1];
                let p = h * w;
                let mut d = Tensor::zeros([n, c, h, w]);
                for ni in 0..n {
                    d.data_mut()[ni * c * p..(ni + 1) * c * p]
                        .copy_from_slice(&g.data()[ni * total * p..(ni * total + c) * p]);
                }
                vec![Some(d)]
            }
            Op::Reshape => vec![Some(g.clone().reshape(self.shape(inp[0]))?)],
        })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv { .. } => "conv2d",
        Op::BinConv { .. } => "binary conv2d",
        Op::Linear => "linear",
        Op::BatchNorm { .. } => "batchnorm",
        Op::Relu => "relu",
        Op::MaxPool { .. } => "max pool",
        Op::AvgPool { .. } => "avg pool",
        Op::GlobalAvgPool => "global avg pool",
        Op::Concat => "concat",
        Op::LinComb { .. } => "add",
        Op::Mul => "mul",
        Op::Sum => "sum",
        Op::RowSoftmax => "softmax",
        Op::Entropy => "entropy",
        Op::MixedSum { .. } => "mixed sum",
        Op::SoftmaxXent { .. } => "cross entropy",
        Op::ChannelPad => "channel pad",
        Op::Reshape => "reshape",
    }
}

/// In-bounds input taps of one pooling window.
fn pool_window(
    geom: &ConvGeometry,
    (h, w): (usize, usize),
    (y, x): (usize, usize),
) -> impl Iterator<Item = (usize, usize)> + '_ {
    let pad = geom.padding as isize;
    let (y0, x0) = (
        (y * geom.stride) as isize - pad,
        (x * geom.stride) as isize - pad,
    );
    (0..geom.kh).flat_map(move |ki| {
        (0..geom.kw).filter_map(move |kj| {
            let iy = y0 + (ki * geom.dilation) as isize;
            let ix = x0 + (kj * geom.dilation) as isize;
            (iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize)
                .then_some((iy as usize, ix as usize))
        })
    })
}

impl ParamStore {
    /// Adds this graph's gradients into the store's parameters.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        let tag = self.tag();
        let pairs: Vec<(ParamId, Var)> = graph.param_leaves(tag).collect();
        for (id, v) in pairs {
            if let Some(g) = grads.get(v) {
                self.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Applies queued running-statistics updates that belong to this store.
    pub fn apply_stat_updates(&mut self, graph: &Graph) {
        let tag = self.tag();
        for u in graph.stat_updates().iter().filter(|u| u.store == tag) {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let p = self.get_mut(id);
                for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}
