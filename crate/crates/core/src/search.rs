//! Differentiable search with the annealed entropy bonus on architecture
//! probabilities.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::autodiff::{clip_grad_norm, sgd_step, Graph, LrSchedule, ScheduleKind, Var};
use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::nn::Precision;
use crate::rng::{substream, STREAM_SHUFFLE};
use crate::space::{LayerType, SpaceFlags};
use crate::supernet::{build_supernet, ArchParams, SuperNet, SuperNetSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub lambda: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate of the architecture step; `None` follows the weight schedule.
    pub arch_lr: Option<f64>,
    pub grad_clip: Option<f64>,
    pub cells: usize,
    pub channels: usize,
    pub seed: u64,
    pub flags: SpaceFlags,
    /// Drops the entropy bonus regardless of `lambda`.
    pub no_div: bool,
    pub precision: Precision,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 1.0,
            tau: 7.7,
            epochs: 50,
            batch: 64,
            lr: 0.025,
            schedule: ScheduleKind::Cosine,
            momentum: 0.9,
            weight_decay: 3e-4,
            arch_lr: None,
            grad_clip: Some(5.0),
            cells: 8,
            channels: 16,
            seed: 0,
            flags: SpaceFlags::default(),
            no_div: false,
            precision: Precision::Binary,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Total row entropy (nats) over both tables.
pub fn arch_entropy(arch: &ArchParams) -> f64 {
    [false, true]
        .iter()
        .flat_map(|&t| arch.probs(t))
        .map(|row| {
            row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum()
}

/// `lambda * exp(-t / tau)`.
pub fn diversity_coefficient(lambda: f64, tau: f64, t: f64) -> f64 {
    lambda * (-t / tau).exp()
}

/// Scalar search objective: cross-entropy minus the weighted entropy bonus.
pub fn search_loss(ce: f64, arch: &ArchParams, lambda: f64, tau: f64, t: f64) -> f64 {
    ce - diversity_coefficient(lambda, tau, t) * arch_entropy(arch)
}

/// Graph form of [`search_loss`]; the entropy term only touches `probs`.
pub fn search_loss_graph(g: &mut Graph, ce: Var, probs: [Var; 2], coeff: f64) -> Result<Var> {
    if coeff == 0.0 {
        return Ok(ce);
    }
    let hn = g.entropy(probs[0])?;
    let hr = g.entropy(probs[1])?;
    g.lin_comb(&[ce, hn, hr], &[1.0, -coeff as f32, -coeff as f32])
}

/// Per-edge argmax op of both tables (normal rows first), lowest index on ties.
pub fn argmax_ops(arch: &ArchParams) -> Vec<LayerType> {
    [false, true]
        .iter()
        .flat_map(|&t| arch.probs(t))
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            arch.ops.ops()[best]
        })
        .collect()
}

pub fn param_op_fraction(ops: &[LayerType]) -> f64 {
    if ops.is_empty() {
        return 0.0;
    }
    ops.iter().filter(|o| o.is_parameterized()).count() as f64 / ops.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub entropy: f64,
    pub div_coeff: f64,
    pub param_op_fraction: f64,
    /// Mean over the epoch's weight steps of the summed `|grad|` of conv weights.
    pub grad_mag_sum: f64,
    pub argmax_ops: Vec<LayerType>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchLog {
    pub records: Vec<SearchRecord>,
}

pub const SEARCH_LOG_HEADER: &str =
    "epoch,train_loss,val_loss,entropy,div_coeff,param_op_fraction,grad_mag_sum,argmax_ops";

impl SearchLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SEARCH_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let ids: Vec<String> = r.argmax_ops.iter().map(|o| o.id().to_string()).collect();
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.entropy,
                r.div_coeff,
                r.param_op_fraction,
                r.grad_mag_sum,
                ids.join(";")
            );
        }
        s
    }
}

pub struct SearchResult {
    pub net: SuperNet,
    pub log: SearchLog,
}

fn diverged(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite(_) => Error::Divergence {
            epoch,
            batch,
            loss: f32::NAN,
        },
        other => other,
    }
}

/// Alternating first-order search: an architecture step on a validation
/// batch, then a weight step on a training batch.
pub fn run_search(config: &SearchConfig, data: &Dataset) -> Result<SearchResult> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset(data.name.clone()));
    }
    let mut spec = SuperNetSpec::new(config.cells, config.channels, config.flags)?;
    spec.in_channels = data.channels;
    spec.num_classes = data.num_classes;
    spec.precision = config.precision;
    let mut net = build_supernet(&spec, config.seed)?;
    let (mut train_idx, mut val_idx) = data.search_split(config.seed)?;
    let lambda = if config.no_div { 0.0 } else { config.lambda };

    let batches = train_idx.len().div_ceil(config.batch).max(1);
    let schedule = LrSchedule::new(config.schedule, config.lr, config.epochs * batches);
    let mut rng = substream(config.seed, STREAM_SHUFFLE);
    let mut log = SearchLog::default();

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        val_idx.shuffle(&mut rng);
        let (mut train_sum, mut val_sum, mut grad_sum) = (0.0, 0.0, 0.0);
        for b in 0..batches {
            let step = epoch * batches + b;
            let lr = schedule.lr_at(step)?;
            let t = epoch as f64 + b as f64 / batches as f64;
            let coeff = diversity_coefficient(lambda, config.tau, t);
            let tb = &train_idx[(b * config.batch).min(train_idx.len())
                ..((b + 1) * config.batch).min(train_idx.len())];
            let vstart = (b * config.batch) % val_idx.len();
            let vb: Vec<usize> = (0..tb.len().min(val_idx.len()))
                .map(|i| val_idx[(vstart + i) % val_idx.len()])
                .collect();

            // architecture step, weights frozen
            let (vx, vy) = data.batch(&vb, Augment::NONE, &mut rng);
            let val_loss = arch_step(&mut net, vx, &vy, coeff, config.arch_lr.unwrap_or(lr))
                .map_err(|e| diverged(e, epoch, b))?;
            check_finite(val_loss, epoch, b)?;
            val_sum += val_loss;

            // weight step, architecture frozen
            let (tx, ty) = data.batch(tb, Augment::NONE, &mut rng);
            let (train_loss, gm) =
                weight_step(&mut net, tx, &ty, lr, config).map_err(|e| diverged(e, epoch, b))?;
            check_finite(train_loss, epoch, b)?;
            train_sum += train_loss;
            grad_sum += gm;
        }
        let ops = argmax_ops(&net.arch);
        log.records.push(SearchRecord {
            epoch,
            train_loss: train_sum / batches as f64,
            val_loss: val_sum / batches as f64,
            entropy: arch_entropy(&net.arch),
            div_coeff: diversity_coefficient(lambda, config.tau, epoch as f64),
            param_op_fraction: param_op_fraction(&ops),
            grad_mag_sum: grad_sum / batches as f64,
            argmax_ops: ops,
        });
    }
    Ok(SearchResult { net, log })
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            batch,
            loss: loss as f32,
        })
    }
}

/// Plain SGD on the architecture logits from one validation batch. Network
/// weights are read as constants and running statistics are left alone.
/// Returns the batch cross-entropy.
pub fn arch_step(
    net: &mut SuperNet,
    x: crate::Tensor,
    y: &[usize],
    coeff: f64,
    lr: f64,
) -> Result<f64> {
    net.weights.set_requires_grad(false);
    net.arch.store.set_requires_grad(true);
    let out = arch_step_inner(net, x, y, coeff, lr);
    net.weights.set_requires_grad(true);
    out
}

fn arch_step_inner(
    net: &mut SuperNet,
    x: crate::Tensor,
    y: &[usize],
    coeff: f64,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new(true);
    let xv = g.constant(x);
    let (logits, probs) = net.forward(&mut g, xv)?;
    let ce = g.softmax_cross_entropy(logits, y)?;
    let loss = search_loss_graph(&mut g, ce, probs, coeff)?;
    let grads = g.backward(loss)?;
    net.arch.store.zero_grad();
    net.arch.store.accumulate(&g, &grads)?;
    sgd_step(&mut net.arch.store, lr as f32, 0.0, 0.0);
    Ok(g.value(ce).data()[0] as f64)
}

/// One momentum step on the network weights from a training batch, with the
/// architecture logits held constant. Returns the batch cross-entropy and the
/// summed conv-weight gradient magnitude before clipping.
pub fn weight_step(
    net: &mut SuperNet,
    x: crate::Tensor,
    y: &[usize],
    lr: f64,
    config: &SearchConfig,
) -> Result<(f64, f64)> {
    net.arch.store.set_requires_grad(false);
    let out = weight_step_inner(net, x, y, lr, config);
    net.arch.store.set_requires_grad(true);
    out
}

fn weight_step_inner(
    net: &mut SuperNet,
    x: crate::Tensor,
    y: &[usize],
    lr: f64,
    config: &SearchConfig,
) -> Result<(f64, f64)> {
    let mut g = Graph::new(true);
    let xv = g.constant(x);
    let (logits, _) = net.forward(&mut g, xv)?;
    let ce = g.softmax_cross_entropy(logits, y)?;
    let grads = g.backward(ce)?;
    net.weights.zero_grad();
    net.weights.accumulate(&g, &grads)?;
    let gm = net.weights.conv_grad_magnitude();
    if let Some(c) = config.grad_clip {
        clip_grad_norm(&mut net.weights, c as f32);
    }
    sgd_step(
        &mut net.weights,
        lr as f32,
        config.momentum as f32,
        config.weight_decay as f32,
    );
    net.weights.apply_stat_updates(&g);
    Ok((g.value(ce).data()[0] as f64, gm))
}
