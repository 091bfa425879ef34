//! Final-network training, evaluation, gradient logging and frozen export.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{
    clip_grad_norm, sgd_step, Graph, LrSchedule, ParamKind, ParamStore, ScheduleKind, Var,
};
use crate::binary::filter_scales;
use crate::bits::pack_signs;
use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::rng::{substream, STREAM_AUGMENT, STREAM_SHUFFLE};
use crate::tensor::Tensor;

/// Anything with parameters and a forward pass producing `(N, K, 1, 1)` logits.
pub trait Model {
    fn weights(&self) -> &ParamStore;
    fn weights_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var>;
}

impl Model for Network {
    fn weights(&self) -> &ParamStore {
        &self.weights
    }
    fn weights_mut(&mut self) -> &mut ParamStore {
        &mut self.weights
    }
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Network::forward(self, g, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub augment: Augment,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Record per-step gradient magnitudes.
    pub grad_log: bool,
    /// Also record the summed `|d loss / d input|` (costs one extra gradient).
    pub input_grad_log: bool,
}

impl TrainConfig {
    /// Final-training values stated for the full-scale runs.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 600,
            batch: 256,
            lr: 0.025,
            momentum: 0.9,
            weight_decay: 3e-6,
            schedule: ScheduleKind::OneCycle,
            augment: Augment::STANDARD,
            grad_clip: Some(5.0),
            seed: 0,
            grad_log: false,
            input_grad_log: false,
        }
    }

    /// Desk-scale defaults: fewer epochs, smaller batches.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    pub per_class: Vec<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub lr: f64,
    pub grad_mag_sum: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,top1,top5,lr,grad_mag_sum";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.4},{:.4},{:.6},{:.6}",
            r.epoch, r.split, r.loss, r.top1, r.top5, r.lr, r.grad_mag_sum
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub epoch: usize,
    pub step: usize,
    pub grad_mag_sum: f64,
    pub input_grad_sum: f64,
}

pub const GRAD_HEADER: &str = "epoch,step,grad_mag_sum,input_grad_sum";

pub fn grad_csv(rows: &[GradRow]) -> String {
    let mut s = String::from(GRAD_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6e}",
            r.epoch, r.step, r.grad_mag_sum, r.input_grad_sum
        );
    }
    s
}

/// `(epoch, sum over conv weights of |grad|)` from the current gradients.
pub fn log_grad_magnitudes(weights: &ParamStore, epoch: usize) -> (usize, f64) {
    (epoch, weights.conv_grad_magnitude())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRow>,
    pub grads: Vec<GradRow>,
}

impl TrainReport {
    pub fn last_train(&self) -> Option<&MetricRow> {
        self.metrics.iter().rev().find(|r| r.split == "train")
    }
}

/// Whether `label` is among the top `k` logits; ties rank the lower index first.
pub fn in_top_k(logits: &[f32], label: usize, k: usize) -> bool {
    let y = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &z)| z > y || (z == y && j < label))
        .count();
    rank < k
}

/// Hits at 1 and 5 for a `(N, K)` logit block.
fn count_hits(logits: &[f32], k: usize, labels: &[usize]) -> (usize, usize) {
    let mut h1 = 0;
    let mut h5 = 0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        h1 += in_top_k(row, l, 1) as usize;
        h5 += in_top_k(row, l, 5) as usize;
    }
    (h1, h5)
}

/// Eval-mode pass over `data`; parameters and running statistics untouched.
pub fn evaluate(model: &dyn Model, data: &Dataset, batch: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.name.clone()));
    }
    let batch = batch.max(1);
    let mut rng = substream(0, 0);
    let k = data.num_classes;
    let (mut h1, mut h5, mut loss) = (0usize, 0usize, 0.0f64);
    let mut correct = vec![0usize; k];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = data.batch(chunk, Augment::NONE, &mut rng);
        let mut g = Graph::new(false);
        let xv = g.constant(x);
        let logits = model.forward(&mut g, xv)?;
        let [_, kk, _, _] = g.shape(logits);
        if kk != k {
            return Err(Error::InvalidGeometry(format!(
                "model emits {} logits for {} classes",
                kk, k
            )));
        }
        let ce = g.softmax_cross_entropy(logits, &y)?;
        loss += g.value(ce).data()[0] as f64 * chunk.len() as f64;
        let z = g.value(logits).data();
        let (a, b) = count_hits(z, k, &y);
        h1 += a;
        h5 += b;
        for (i, &l) in y.iter().enumerate() {
            if in_top_k(&z[i * k..(i + 1) * k], l, 1) {
                correct[l] += 1;
            }
        }
    }
    let n = data.len() as f64;
    let counts = data.class_counts();
    Ok(EvalResult {
        top1: 100.0 * h1 as f64 / n,
        top5: 100.0 * h5 as f64 / n,
        per_class: correct
            .iter()
            .zip(&counts)
            .map(|(&c, &t)| {
                if t == 0 {
                    0.0
                } else {
                    100.0 * c as f64 / t as f64
                }
            })
            .collect(),
        loss: loss / n,
    })
}

/// SGD over shuffled batches with batchnorm statistics updated in train mode.
/// `eval` (if given) is scored after every epoch.
pub fn train(
    model: &mut dyn Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.name.clone()));
    }
    let batches = data.len().div_ceil(config.batch);
    let schedule = LrSchedule::new(config.schedule, config.lr, (config.epochs * batches).max(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = substream(config.seed, STREAM_SHUFFLE);
    let mut aug = substream(config.seed, STREAM_AUGMENT);
    let k = data.num_classes;
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut h1, mut h5, mut gsum) = (0.0f64, 0usize, 0usize, 0.0f64);
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let step = epoch * batches + b;
            lr = schedule.lr_at(step)?;
            let (x, y) = data.batch(chunk, config.augment, &mut aug);
            let mut g = Graph::new(true);
            let xv = g.leaf(x, config.input_grad_log);
            let out = (|| {
                let logits = model.forward(&mut g, xv)?;
                let ce = g.softmax_cross_entropy(logits, &y)?;
                Ok::<_, Error>((logits, ce))
            })();
            let (logits, ce) = out.map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence {
                    epoch,
                    batch: b,
                    loss: f32::NAN,
                },
                other => other,
            })?;
            let l = g.value(ce).data()[0];
            if !l.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: l,
                });
            }
            let grads = g.backward(ce)?;
            let w = model.weights_mut();
            w.zero_grad();
            w.accumulate(&g, &grads)?;
            let (_, gm) = log_grad_magnitudes(w, epoch);
            if config.grad_log {
                let ig = if config.input_grad_log {
                    grads.get(xv).map_or(0.0, |t| t.abs_sum())
                } else {
                    0.0
                };
                report.grads.push(GradRow {
                    epoch,
                    step,
                    grad_mag_sum: gm,
                    input_grad_sum: ig,
                });
            }
            if let Some(c) = config.grad_clip {
                clip_grad_norm(w, c as f32);
            }
            sgd_step(
                w,
                lr as f32,
                config.momentum as f32,
                config.weight_decay as f32,
            );
            w.apply_stat_updates(&g);
            loss_sum += l as f64 * chunk.len() as f64;
            let (a, c) = count_hits(g.value(logits).data(), k, &y);
            h1 += a;
            h5 += c;
            gsum += gm;
        }
        let n = data.len() as f64;
        report.metrics.push(MetricRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            top1: 100.0 * h1 as f64 / n,
            top5: 100.0 * h5 as f64 / n,
            lr,
            grad_mag_sum: gsum / batches as f64,
        });
        if let Some(ev) = eval {
            let r = evaluate(&*model, ev, config.batch)?;
            report.metrics.push(MetricRow {
                epoch,
                split: "test".into(),
                loss: r.loss,
                top1: r.top1,
                top5: r.top5,
                lr,
                grad_mag_sum: 0.0,
            });
        }
    }
    Ok(report)
}

pub const FROZEN_MAGIC: &[u8; 8] = b"BNASFRZN";
pub const FROZEN_VERSION: u32 = 1;

/// One entry of a frozen inference checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum FrozenEntry {
    Float {
        name: String,
        shape: [usize; 4],
        data: Vec<f32>,
    },
    /// Filter rows of `C_in*kh*kw` sign bits in `(c, ki, kj)` order, one
    /// set bit per `+1`, padded to whole 64-bit words per filter.
    Binary {
        name: String,
        shape: [usize; 4],
        beta: Vec<f32>,
        words: Vec<u64>,
    },
}

/// Binary conv weights become packed bits plus per-filter scales; running
/// statistics and every other tensor stay float.
pub fn freeze(weights: &ParamStore) -> Vec<FrozenEntry> {
    weights
        .iter()
        .map(|(_, p)| {
            let shape = p.value.shape();
            if p.kind == ParamKind::BinConv {
                let rows = Tensor::new(
                    [1, 1, shape[0], p.value.item_len()],
                    p.value.data().to_vec(),
                )
                .expect("same length");
                FrozenEntry::Binary {
                    name: p.name.clone(),
                    shape,
                    beta: filter_scales(&p.value),
                    words: pack_signs(&rows).words().to_vec(),
                }
            } else {
                FrozenEntry::Float {
                    name: p.name.clone(),
                    shape,
                    data: p.value.data().to_vec(),
                }
            }
        })
        .collect()
}

/// Layout (little-endian): magic "BNASFRZN", u32 version, u32 count, then per
/// entry u32 name_len, name, u8 kind (0 float, 1 binary), 4 x u32 dims, and
/// either numel x f32, or C_out x f32 betas, u32 word count, words x u64.
pub fn encode_frozen(entries: &[FrozenEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FROZEN_MAGIC);
    out.extend_from_slice(&FROZEN_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let header = |out: &mut Vec<u8>, name: &str, kind: u8, shape: &[usize; 4]| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind);
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    };
    for e in entries {
        match e {
            FrozenEntry::Float { name, shape, data } => {
                header(&mut out, name, 0, shape);
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            FrozenEntry::Binary {
                name,
                shape,
                beta,
                words,
            } => {
                header(&mut out, name, 1, shape);
                for v in beta {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&(words.len() as u32).to_le_bytes());
                for w in words {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Format {
                path: "<frozen>".into(),
                msg: format!("truncated at byte {}", self.at),
            })?;
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

pub fn decode_frozen(bytes: &[u8]) -> Result<Vec<FrozenEntry>> {
    let fmt = |msg: String| Error::Format {
        path: "<frozen>".into(),
        msg,
    };
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != FROZEN_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FROZEN_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| fmt("non UTF-8 name".into()))?;
        let kind = r.take(1)?[0];
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        match kind {
            0 => {
                let data = r.f32s(shape.iter().product())?;
                out.push(FrozenEntry::Float { name, shape, data });
            }
            1 => {
                let beta = r.f32s(shape[0])?;
                let n = r.u32()? as usize;
                let words = r
                    .take(8 * n)?
                    .chunks_exact(8)
                    .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                out.push(FrozenEntry::Binary {
                    name,
                    shape,
                    beta,
                    words,
                });
            }
            k => return Err(fmt(format!("unknown entry kind {k} for {name}"))),
        }
    }
    if r.at != bytes.len() {
        return Err(fmt("trailing bytes".into()));
    }
    Ok(out)
}

pub fn export_frozen(weights: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_frozen(&freeze(weights))).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_tie_break() {
        let z = [1.0, 1.0, 1.0];
        assert!(in_top_k(&z, 0, 1));
        assert!(!in_top_k(&z, 1, 1));
        assert!(in_top_k(&z, 2, 3));
        let z = [0.1, 0.9, 0.5, 0.3, 0.2, 0.0, -1.0];
        assert!(in_top_k(&z, 1, 1));
        assert!(in_top_k(&z, 4, 5));
        assert!(!in_top_k(&z, 5, 5));
    }

    #[test]
    fn grad_magnitude_sums_conv_weights_only() {
        let mut s = ParamStore::new();
        let c = s.add("c", ParamKind::BinConv, Tensor::zeros([16, 1, 3, 3]));
        let l = s.add("l", ParamKind::Linear, Tensor::zeros([2, 2, 1, 1]));
        assert_eq!(log_grad_magnitudes(&s, 0), (0, 0.0));
        s.get_mut(c).grad.fill(1.0);
        s.get_mut(l).grad.fill(5.0);
        assert_eq!(log_grad_magnitudes(&s, 3), (3, 144.0));
    }

    #[test]
    fn frozen_round_trip() {
        let mut s = ParamStore::new();
        s.add(
            "w",
            ParamKind::BinConv,
            Tensor::new([2, 1, 1, 3], vec![1.0, -2.0, 0.0, -0.5, -0.5, 3.0]).unwrap(),
        );
        s.add("b", ParamKind::Bias, Tensor::full([1, 2, 1, 1], 0.25));
        let f = freeze(&s);
        match &f[0] {
            FrozenEntry::Binary { beta, words, .. } => {
                assert_eq!(beta, &vec![1.0, 4.0 / 3.0]);
                assert_eq!(words, &vec![0b101, 0b100]);
            }
            other => panic!("{other:?}"),
        }
        let bytes = encode_frozen(&f);
        assert_eq!(decode_frozen(&bytes).unwrap(), f);
        assert!(decode_frozen(&bytes[..bytes.len() - 1]).is_err());
    }
}
