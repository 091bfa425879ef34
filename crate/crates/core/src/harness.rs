//! Desk-scale diagnostic studies: per-layer-type quantization error, search
//! ablations, the separable-conv proportion comparison and the skip-gradient
//! probe.
//!
//! Every study is a pure function of its spec, its seeds and the data it is
//! handed; rendered CSVs are byte-identical across reruns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genotype::{derive, op_proportion, Genotype, Provenance};
use crate::lowering::ConvGeometry;
use crate::network::{build_network, Network, NetworkSpec};
use crate::nn::{ConvBlock, Linear, Precision, SepBlock};
use crate::rng::{substream, STREAM_INIT};
use crate::search::{run_search, SearchConfig};
use crate::space::{LayerType, SpaceFlags};
use crate::train::{evaluate, train, EvalResult, GradRow, Model, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudyId {
    QuantError,
    Ablation,
    SepconvStudy,
    SkipProbe,
}

impl StudyId {
    pub fn name(self) -> &'static str {
        match self {
            StudyId::QuantError => "quant_error",
            StudyId::Ablation => "ablation",
            StudyId::SepconvStudy => "sepconv_study",
            StudyId::SkipProbe => "skip_probe",
        }
    }
}

/// Switches applied to the full pipeline in an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoSkip,
    NoZeroise,
    NoDiv,
    NoDilated,
    KeepSepconv,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoSkip,
        Ablation::NoZeroise,
        Ablation::NoDiv,
        Ablation::NoDilated,
        Ablation::KeepSepconv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSkip => "no_skip",
            Ablation::NoZeroise => "no_zeroise",
            Ablation::NoDiv => "no_div",
            Ablation::NoDilated => "no_dilated",
            Ablation::KeepSepconv => "keep_sepconv",
        }
    }

    fn apply(self, cfg: &mut SearchConfig) {
        let f = &mut cfg.flags;
        match self {
            Ablation::Full => {}
            Ablation::NoSkip => f.no_skip = true,
            Ablation::NoZeroise => f.no_zeroise = true,
            Ablation::NoDiv => cfg.no_div = true,
            Ablation::NoDilated => f.no_dilated = true,
            Ablation::KeepSepconv => f.keep_sepconv = true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudySpec {
    pub id: StudyId,
    /// Probe layers for the quantization-error study.
    pub layers: Vec<LayerType>,
    pub precisions: Vec<Precision>,
    pub ablations: Vec<Ablation>,
    /// Number of leading training images used.
    pub subset: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
    /// Search/network size for the pipeline studies.
    pub cells: usize,
    pub channels: usize,
    pub search_epochs: usize,
    pub gamma: f64,
}

impl StudySpec {
    /// 10k images, 20 epochs, 3 seeds.
    pub fn desk(id: StudyId) -> Self {
        StudySpec {
            id,
            layers: vec![
                LayerType::BinConv3x3,
                LayerType::BinConv5x5,
                LayerType::BinDilConv3x3,
                LayerType::BinDilConv5x5,
                LayerType::SepConv3x3,
                LayerType::SepConv5x5,
            ],
            precisions: vec![Precision::Binary, Precision::Float],
            ablations: Ablation::ALL.to_vec(),
            subset: 10_000,
            epochs: 20,
            batch: 64,
            seeds: vec![0, 1, 2],
            cells: 8,
            channels: 16,
            search_epochs: 15,
            gamma: 1.0,
        }
    }

    /// Full training set and the final-training epoch budget.
    pub fn paper(id: StudyId) -> Self {
        StudySpec {
            subset: 50_000,
            epochs: 600,
            batch: 256,
            search_epochs: 50,
            cells: 20,
            channels: 36,
            ..Self::desk(id)
        }
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("study needs at least one seed".into()));
        }
        if self.subset == 0 || self.subset > data.len() {
            return Err(Error::Config(format!(
                "subset {} not within dataset of {} images",
                self.subset,
                data.len()
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be >= 1".into()));
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            seed,
            ..TrainConfig::desk()
        }
    }
}

pub const PROBE_CHANNELS: usize = 32;
pub const PROBE_HIDDEN: [usize; 2] = [512, 128];

#[derive(Clone, Debug)]
pub enum ProbeLayer {
    Conv(ConvBlock),
    Sep(SepBlock),
}

/// Three repetitions of one layer type (32 channels, the first with stride 2)
/// followed by three fully connected layers `flat -> 512 -> 128 -> classes`.
#[derive(Clone, Debug)]
pub struct ProbeNet {
    pub weights: ParamStore,
    pub layers: Vec<ProbeLayer>,
    pub fcs: Vec<Linear>,
    pub input_shape: [usize; 3],
}

pub fn build_probe(
    layer: LayerType,
    precision: Precision,
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<ProbeNet> {
    let (k, d) = layer
        .conv_shape()
        .ok_or_else(|| Error::Config(format!("{layer} is not a convolution")))?;
    let mut rng = substream(seed, STREAM_INIT);
    let mut weights = ParamStore::new();
    let mut layers = Vec::new();
    let mut shape = [1, input_shape[0], input_shape[1], input_shape[2]];
    for i in 0..3 {
        let stride = if i == 0 { 2 } else { 1 };
        let geom = ConvGeometry::same(k, stride, d);
        let name = format!("probe{i}");
        let c_in = shape[1];
        let l = if layer.is_sep_conv() {
            let b = SepBlock::new(
                &mut weights,
                &name,
                c_in,
                PROBE_CHANNELS,
                geom,
                precision,
                &mut rng,
            );
            shape = b.pointwise.output_shape(b.depthwise.output_shape(shape)?)?;
            ProbeLayer::Sep(b)
        } else {
            let b = ConvBlock::new(
                &mut weights,
                &name,
                c_in,
                PROBE_CHANNELS,
                geom,
                1,
                precision,
                true,
                &mut rng,
            );
            shape = b.output_shape(shape)?;
            ProbeLayer::Conv(b)
        };
        layers.push(l);
    }
    let flat = shape[1] * shape[2] * shape[3];
    let dims = [flat, PROBE_HIDDEN[0], PROBE_HIDDEN[1], num_classes];
    let fcs = (0..3)
        .map(|i| {
            Linear::new(
                &mut weights,
                &format!("fc{i}"),
                dims[i],
                dims[i + 1],
                &mut rng,
            )
        })
        .collect();
    Ok(ProbeNet {
        weights,
        layers,
        fcs,
        input_shape,
    })
}

impl Model for ProbeNet {
    fn weights(&self) -> &ParamStore {
        &self.weights
    }
    fn weights_mut(&mut self) -> &mut ParamStore {
        &mut self.weights
    }
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s[1..] != self.input_shape {
            return Err(Error::InvalidGeometry(format!(
                "probe expects {:?} inputs, got {:?}",
                self.input_shape, s
            )));
        }
        let mut h = x;
        for l in &self.layers {
            h = match l {
                ProbeLayer::Conv(b) => b.forward(g, &self.weights, h)?,
                ProbeLayer::Sep(b) => b.forward(g, &self.weights, h)?,
            };
        }
        for (i, fc) in self.fcs.iter().enumerate() {
            h = fc.forward(g, &self.weights, h)?;
            if i + 1 < self.fcs.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// One labelled result row of a study table.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub label: String,
    pub seed: u64,
    pub result: EvalResult,
    /// Final training-split top-1.
    pub train_top1: f64,
    /// Study-specific extra column (for example a selected-op proportion).
    pub extra: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    /// Rows with the given label.
    pub fn by_label<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a StudyRow> + 'a {
        self.rows.iter().filter(move |r| r.label == label)
    }

    pub fn mean_top1(&self, label: &str) -> Option<f64> {
        mean(self.by_label(label).map(|r| r.result.top1))
    }

    pub fn mean_train_top1(&self, label: &str) -> Option<f64> {
        mean(self.by_label(label).map(|r| r.train_top1))
    }

    pub fn mean_extra(&self, label: &str) -> Option<f64> {
        mean(self.by_label(label).map(|r| r.extra))
    }

    fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label.as_str()) {
                out.push(&r.label);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,seed,top1,top5,loss,train_top1,extra\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{:.6},{:.4},{:.6}",
                r.label, r.seed, r.result.top1, r.result.top5, r.result.loss, r.train_top1, r.extra
            );
        }
        s
    }

    /// Per-label means over seeds.
    pub fn summary(&self, title: &str) -> String {
        let mut s = format!("{title}\n");
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>10} {:>10} {:>12} {:>10}",
            "run", "seeds", "top1", "top5", "train top1", "extra"
        );
        for l in self.labels() {
            let n = self.by_label(l).count();
            let t5 = mean(self.by_label(l).map(|r| r.result.top5)).unwrap_or(0.0);
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>10.2} {:>10.2} {:>12.2} {:>10.4}",
                l,
                n,
                self.mean_top1(l).unwrap_or(0.0),
                t5,
                self.mean_train_top1(l).unwrap_or(0.0),
                self.mean_extra(l).unwrap_or(0.0)
            );
        }
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn probe_label(layer: LayerType, precision: Precision) -> String {
    let p = match precision {
        Precision::Binary => "binary",
        Precision::Float => "float",
    };
    let base = layer.name().trim_start_matches("bin_");
    format!("{p}_{base}")
}

fn fit(
    model: &mut dyn Model,
    train_set: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(EvalResult, f64)> {
    let report = train(model, train_set, None, cfg)?;
    let train_top1 = report.last_train().map_or(0.0, |r| r.top1);
    Ok((evaluate(&*model, test, cfg.batch)?, train_top1))
}

/// Trains and scores one probe net per seed.
pub fn quant_error_study(
    layer: LayerType,
    precision: Precision,
    spec: &StudySpec,
    train_set: &Dataset,
    test: &Dataset,
) -> Result<Vec<StudyRow>> {
    spec.validate(train_set)?;
    let data = train_set.take(spec.subset);
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let mut net = build_probe(layer, precision, data.input_shape(), data.num_classes, seed)?;
        let (result, train_top1) = fit(&mut net, &data, test, &spec.train_config(seed))?;
        rows.push(StudyRow {
            label: probe_label(layer, precision),
            seed,
            result,
            train_top1,
            extra: 0.0,
        });
    }
    Ok(rows)
}

/// Every `(layer, precision)` combination of the spec.
pub fn run_quant_error(
    spec: &StudySpec,
    train_set: &Dataset,
    test: &Dataset,
) -> Result<StudyTable> {
    let mut table = StudyTable::default();
    for &layer in &spec.layers {
        for &p in &spec.precisions {
            table
                .rows
                .extend(quant_error_study(layer, p, spec, train_set, test)?);
        }
    }
    Ok(table)
}

/// Search, derive at the spec's gamma, and build the matching network spec.
pub fn search_and_derive(cfg: &SearchConfig, data: &Dataset, gamma: f64) -> Result<Genotype> {
    let result = run_search(cfg, data)?;
    derive(
        &result.net.arch,
        gamma,
        Provenance {
            seed: cfg.seed,
            config_hash: String::new(),
        },
    )
}

fn pipeline_search_config(spec: &StudySpec, seed: u64) -> SearchConfig {
    SearchConfig {
        epochs: spec.search_epochs,
        batch: spec.batch,
        cells: spec.cells,
        channels: spec.channels,
        seed,
        ..SearchConfig::default()
    }
}

fn network_spec(geno: Genotype, spec: &StudySpec, data: &Dataset, skip: bool) -> NetworkSpec {
    NetworkSpec {
        num_classes: data.num_classes,
        input_shape: data.input_shape(),
        inter_cell_skip: skip,
        ..NetworkSpec::new(geno, spec.cells, spec.channels)
    }
}

/// Search, derive and train once per (ablation, seed). `extra` holds the
/// fraction of parameterized ops in the derived genotype.
pub fn run_ablation(spec: &StudySpec, train_set: &Dataset, test: &Dataset) -> Result<StudyTable> {
    spec.validate(train_set)?;
    let data = train_set.take(spec.subset);
    let mut table = StudyTable::default();
    for &ab in &spec.ablations {
        for &seed in &spec.seeds {
            let mut cfg = pipeline_search_config(spec, seed);
            ab.apply(&mut cfg);
            let geno = search_and_derive(&cfg, &data, spec.gamma)?;
            let extra = param_fraction(&geno);
            let net_spec = network_spec(geno, spec, &data, !cfg.flags.no_skip);
            let mut net = build_network(&net_spec, seed)?;
            let (result, train_top1) = fit(&mut net, &data, test, &spec.train_config(seed))?;
            table.rows.push(StudyRow {
                label: ab.name().into(),
                seed,
                result,
                train_top1,
                extra,
            });
        }
    }
    Ok(table)
}

fn param_fraction(g: &Genotype) -> f64 {
    let ops: Vec<LayerType> = g.ops().collect();
    ops.iter().filter(|o| o.is_parameterized()).count() as f64 / ops.len().max(1) as f64
}

/// Keep-sepconv searches in the binary domain and with float convolutions;
/// `extra` is the proportion of separable convs among the derived edges.
pub fn sepconv_study(spec: &StudySpec, train_set: &Dataset) -> Result<StudyTable> {
    spec.validate(train_set)?;
    let data = train_set.take(spec.subset);
    let mut table = StudyTable::default();
    for &precision in &spec.precisions {
        for &seed in &spec.seeds {
            let mut cfg = pipeline_search_config(spec, seed);
            cfg.flags.keep_sepconv = true;
            cfg.precision = precision;
            let geno = search_and_derive(&cfg, &data, spec.gamma)?;
            let sep = op_proportion(&geno, LayerType::SepConv3x3)
                + op_proportion(&geno, LayerType::SepConv5x5);
            let label = match precision {
                Precision::Binary => "searched_binary",
                Precision::Float => "searched_float",
            };
            table.rows.push(StudyRow {
                label: label.into(),
                seed,
                result: EvalResult {
                    top1: 0.0,
                    top5: 0.0,
                    per_class: Vec::new(),
                    loss: 0.0,
                },
                train_top1: 0.0,
                extra: sep,
            });
        }
    }
    Ok(table)
}

/// Gradient logs of a network and its skip-free twin, same seed and data.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipProbe {
    pub with_skip: Vec<GradRow>,
    pub without_skip: Vec<GradRow>,
}

impl SkipProbe {
    pub const HEADER: &'static str =
        "epoch,step,grad_mag_sum_skip,input_grad_sum_skip,grad_mag_sum_no_skip,input_grad_sum_no_skip";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for (a, b) in self.with_skip.iter().zip(&self.without_skip) {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6e},{:.6},{:.6e}",
                a.epoch, a.step, a.grad_mag_sum, a.input_grad_sum, b.grad_mag_sum, b.input_grad_sum
            );
        }
        s
    }
}

/// Trains twin networks from one genotype with skips on and off, logging
/// conv-weight and input gradient magnitudes at every step.
pub fn skip_gradient_probe(
    genotype: &Genotype,
    cells: usize,
    channels: usize,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<SkipProbe> {
    let mut logs = Vec::with_capacity(2);
    for skip in [true, false] {
        let spec = NetworkSpec {
            num_classes: data.num_classes,
            input_shape: data.input_shape(),
            inter_cell_skip: skip,
            ..NetworkSpec::new(genotype.clone(), cells, channels)
        };
        let mut net: Network = build_network(&spec, config.seed)?;
        let cfg = TrainConfig {
            grad_log: true,
            input_grad_log: true,
            ..config.clone()
        };
        logs.push(train(&mut net, data, None, &cfg)?.grads);
    }
    let without_skip = logs.pop().expect("two runs");
    let with_skip = logs.pop().expect("two runs");
    Ok(SkipProbe {
        with_skip,
        without_skip,
    })
}

/// Rendered study artifacts, written below `results/<study>/<stamp>/`.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyOutput {
    pub files: Vec<(String, String)>,
}

impl StudyOutput {
    pub fn from_table(id: StudyId, table: &StudyTable) -> Self {
        StudyOutput {
            files: vec![
                (format!("{}.csv", id.name()), table.to_csv()),
                ("summary.txt".into(), table.summary(id.name())),
            ],
        }
    }

    pub fn write(&self, root: &Path, id: StudyId, stamp: &str) -> Result<PathBuf> {
        let dir = root.join(id.name()).join(stamp);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, body) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(dir)
    }
}

/// Genotype whose every kept edge is `op`, two edges from the cell inputs per node.
pub fn uniform_genotype(op: LayerType, nodes: usize) -> Genotype {
    use crate::genotype::{EdgeRecord, NodeRecord, VERSION, VERSION_SEPCONV};
    let table: Vec<NodeRecord> = (0..nodes)
        .map(|i| NodeRecord {
            node: 2 + i,
            edges: vec![EdgeRecord { from: 0, op }, EdgeRecord { from: 1, op }],
        })
        .collect();
    Genotype {
        version: if op.is_sep_conv() {
            VERSION_SEPCONV
        } else {
            VERSION
        },
        gamma: 1.0,
        normal: table.clone(),
        reduce: table,
        provenance: Provenance::default(),
    }
}

/// Fixed small genotype for skip studies: a conv chain with one pooling edge.
pub fn small_genotype() -> Genotype {
    use crate::genotype::{EdgeRecord, NodeRecord, VERSION};
    let e = |from, op| EdgeRecord { from, op };
    let table = vec![
        NodeRecord {
            node: 2,
            edges: vec![e(0, LayerType::BinConv3x3), e(1, LayerType::BinConv3x3)],
        },
        NodeRecord {
            node: 3,
            edges: vec![e(1, LayerType::BinDilConv3x3), e(2, LayerType::MaxPool3x3)],
        },
    ];
    Genotype {
        version: VERSION,
        gamma: 1.0,
        normal: table.clone(),
        reduce: table,
        provenance: Provenance::default(),
    }
}

/// Flags used by a search config built for `ablation`.
pub fn ablation_flags(ablation: Ablation) -> (SpaceFlags, bool) {
    let mut cfg = SearchConfig::default();
    ablation.apply(&mut cfg);
    (cfg.flags, cfg.no_div)
}
