//! Acceptance criteria 1-8, one PASS / FAIL / BLOCKED line each.
//!
//! Desk-scale runs need CIFAR-10 under `BNAS_CIFAR10_DIR` (default
//! `data/cifar-10-batches-bin`) and `BNAS_DESK=1`; without both the criteria
//! that depend on them report BLOCKED with the parts that did run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};

use bnas::autodiff::{Graph, ParamStore};
use bnas::cell::CellTemplate;
use bnas::data::{default_cifar10_dir, load_cifar10, synthetic, Augment, Dataset};
use bnas::flops::{
    conv_block_cost, count_flops, inference_speedup_against, memory_savings_against,
};
use bnas::genotype::{select_op, Genotype};
use bnas::harness::{
    probe_label, run_quant_error, search_and_derive, small_genotype, StudyId, StudySpec,
};
use bnas::lowering::ConvGeometry;
use bnas::network::{build_network, NetworkSpec};
use bnas::nn::{ConvBlock, Precision};
use bnas::search::{arch_entropy, diversity_coefficient, run_search, SearchConfig};
use bnas::space::{LayerType, OpSet, SEARCH_SPACE};
use bnas::supernet::ArchParams;
use bnas::train::{evaluate, train, TrainConfig};
use common::{grad_suite, rng, uniform_genotype, xnor};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Blocked,
}

type Outcome = (Status, String);

fn pass(detail: impl Into<String>) -> Outcome {
    (Status::Pass, detail.into())
}

fn fail(detail: impl Into<String>) -> Outcome {
    (Status::Fail, detail.into())
}

fn blocked(detail: impl Into<String>) -> Outcome {
    (Status::Blocked, detail.into())
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

/// CIFAR-10 and the opt-in for desk-scale runs, or the reason they are unavailable.
fn desk_data() -> Result<(Dataset, Dataset), String> {
    let dir = default_cifar10_dir();
    if !dir.join("data_batch_1.bin").exists() {
        return Err(format!("CIFAR-10 not found at {}", dir.display()));
    }
    if std::env::var("BNAS_DESK").as_deref() != Ok("1") {
        return Err("desk-scale run not requested (BNAS_DESK=1)".into());
    }
    load_cifar10(&dir).map_err(|e| format!("loading {}: {e}", dir.display()))
}

fn c1_xnor() -> Outcome {
    let start = std::time::Instant::now();
    match xnor::worst_config_error() {
        Ok(worst) => {
            let secs = start.elapsed().as_secs_f64();
            verdict(
                secs < 60.0,
                format!(
                    "{} configs, worst rel err {worst:.2e} <= {:.0e}, {secs:.1}s",
                    xnor::CONFIGS,
                    xnor::TOL
                ),
            )
        }
        Err(e) => fail(e),
    }
}

fn c2_gradients() -> Outcome {
    let start = std::time::Instant::now();
    let suite = grad_suite::all();
    let worst = suite.iter().map(|s| s.worst).fold(0.0, f64::max);
    let ste = xnor::ste_mismatches();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        ste == 0 && secs < 300.0,
        format!(
            "{} checks x {} instances, worst rel err {worst:.2e} <= {:.0e}; STE mismatches {ste}; {secs:.1}s",
            suite.len(),
            grad_suite::INSTANCES,
            grad_suite::TOL
        ),
    )
}

fn c3_anchors() -> Outcome {
    let mut bad = Vec::new();
    let c0 = diversity_coefficient(1.0, 7.7, 0.0);
    let c1 = diversity_coefficient(1.0, 7.7, 7.7);
    if c0 != 1.0 {
        bad.push(format!("coeff(0) = {c0}"));
    }
    if (c1 - (-1.0f64).exp()).abs() > 1e-9 {
        bad.push(format!("coeff(tau) = {c1}"));
    }
    let ops = OpSet::new(SEARCH_SPACE.to_vec()).unwrap();
    let arch = ArchParams::new(CellTemplate::default(), ops.clone());
    let rows = 2 * CellTemplate::default().edge_count();
    let h = arch_entropy(&arch) / rows as f64;
    if (h - 7f64.ln()).abs() > 1e-9 {
        bad.push(format!("uniform row entropy {h}"));
    }
    let mut r = rng(33);
    for _ in 0..1000 {
        let raw: Vec<f64> = (0..ops.len()).map(|_| r.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        let (op, _) = select_op(&p, &ops, 1.0).unwrap();
        if op != ops.ops()[best] {
            bad.push(format!(
                "gamma=1 picked {op} over argmax {}",
                ops.ops()[best]
            ));
            break;
        }
    }
    let mut p = vec![0.05; ops.len()];
    p[ops.position(LayerType::Zeroise).unwrap()] = 0.40;
    p[ops.position(LayerType::BinConv3x3).unwrap()] = 0.35;
    let (worked, _) = select_op(&p, &ops, 2.0).unwrap();
    if worked != LayerType::BinConv3x3 {
        bad.push(format!("0.40/2 vs 0.35 picked {worked}"));
    }
    let (plain, _) = select_op(&p, &ops, 1.0).unwrap();
    if plain != LayerType::Zeroise {
        bad.push(format!("0.40 vs 0.35 at gamma=1 picked {plain}"));
    }
    if bad.is_empty() {
        pass("coeff(0)=1, coeff(7.7)=1/e, H(uniform)=ln 7, gamma=1 == argmax on 1000 rows, 0.40/2 < 0.35 -> conv")
    } else {
        fail(bad.join("; "))
    }
}

fn c4_quant_error() -> Outcome {
    let (train_set, test) = match desk_data() {
        Ok(d) => d,
        Err(why) => return blocked(why),
    };
    let spec = StudySpec {
        layers: vec![LayerType::BinConv3x3, LayerType::SepConv3x3],
        ..StudySpec::desk(StudyId::QuantError)
    };
    let table = match run_quant_error(&spec, &train_set, &test) {
        Ok(t) => t,
        Err(e) => return fail(e.to_string()),
    };
    let m = |t, p| table.mean_top1(&probe_label(t, p)).unwrap_or(f64::NAN);
    let (bc, bs) = (
        m(LayerType::BinConv3x3, Precision::Binary),
        m(LayerType::SepConv3x3, Precision::Binary),
    );
    let (fc, fs) = (
        m(LayerType::BinConv3x3, Precision::Float),
        m(LayerType::SepConv3x3, Precision::Float),
    );
    verdict(
        bs <= 15.0 && bc >= 30.0 && bc > bs && fc > bc && fs > bs,
        format!("binary conv {bc:.2} sep {bs:.2}; float conv {fc:.2} sep {fs:.2}"),
    )
}

/// Abs-sum of the input gradient of the cross-entropy of a stacked network.
fn input_gradient(genotype: &Genotype, skip: bool) -> f64 {
    let data = synthetic(8, 3, 8, 10, 5);
    let spec = NetworkSpec {
        input_shape: data.input_shape(),
        inter_cell_skip: skip,
        ..NetworkSpec::new(genotype.clone(), 3, 4)
    };
    let net = build_network(&spec, 0).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&idx, Augment::NONE, &mut rng(0));
    let mut g = Graph::new(true);
    let xv = g.leaf(x, true);
    let logits = net.forward(&mut g, xv).unwrap();
    let ce = g.softmax_cross_entropy(logits, &y).unwrap();
    let grads = g.backward(ce).unwrap();
    grads.get(xv).map_or(0.0, |t| t.abs_sum())
}

fn c5_skip() -> Outcome {
    let zero = uniform_genotype(LayerType::Zeroise, 4);
    let off = input_gradient(&zero, false);
    let on = input_gradient(&zero, true);
    let exact = format!("all-Zeroise input grad |g|_1: skips off {off:e}, on {on:.3e}");
    if off != 0.0 || on == 0.0 {
        return fail(exact);
    }
    let (train_set, _) = match desk_data() {
        Ok(d) => d,
        Err(why) => return blocked(format!("{exact} (exact part holds); desk part: {why}")),
    };
    let data = train_set.take(10_000);
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::desk()
    };
    let mut top1 = [0.0; 2];
    for (i, skip) in [true, false].into_iter().enumerate() {
        let spec = NetworkSpec {
            inter_cell_skip: skip,
            ..NetworkSpec::new(small_genotype(), 8, 16)
        };
        let mut net = build_network(&spec, 0).unwrap();
        match train(&mut net, &data, None, &cfg) {
            Ok(rep) => top1[i] = rep.last_train().map_or(0.0, |r| r.top1),
            Err(e) => return fail(e.to_string()),
        }
    }
    verdict(
        top1[0] - top1[1] >= 5.0,
        format!(
            "{exact}; train top1 with skip {:.2}, without {:.2}",
            top1[0], top1[1]
        ),
    )
}

fn c6_diversity() -> Outcome {
    let (train_set, _) = match desk_data() {
        Ok(d) => d,
        Err(why) => return blocked(why),
    };
    let data = train_set.take(5_000);
    let mut mean = [0.0; 2];
    for (i, lambda) in [1.0, 0.0].into_iter().enumerate() {
        for seed in 0..3 {
            let cfg = SearchConfig {
                lambda,
                epochs: 15,
                cells: 4,
                channels: 8,
                seed,
                ..SearchConfig::default()
            };
            let log = match run_search(&cfg, &data) {
                Ok(r) => r.log,
                Err(e) => return fail(e.to_string()),
            };
            let early: Vec<f64> = log
                .records
                .iter()
                .take(5)
                .map(|r| r.param_op_fraction)
                .collect();
            mean[i] += early.iter().sum::<f64>() / early.len() as f64 / 3.0;
        }
    }
    verdict(
        mean[0] >= mean[1],
        format!(
            "parameterized fraction, epochs 1-5: lambda=1 {:.3}, lambda=0 {:.3}",
            mean[0], mean[1]
        ),
    )
}

fn c7_flops() -> Outcome {
    let mut store = ParamStore::new();
    let block = ConvBlock::new(
        &mut store,
        "probe",
        16,
        16,
        ConvGeometry::same(3, 1, 1),
        1,
        Precision::Binary,
        false,
        &mut rng(0),
    );
    let (cost, _) = conv_block_cost(&block, [1, 16, 32, 32], "probe").unwrap();
    let mut bad = Vec::new();
    if cost.binary_ops != 2_359_296 {
        bad.push(format!("binary MACs {}", cost.binary_ops));
    }
    let with_zero = NetworkSpec::new(uniform_genotype(LayerType::Zeroise, 4), 8, 16);
    let report = count_flops(&with_zero).unwrap();
    let zeroise: Vec<_> = report
        .layers
        .iter()
        .filter(|l| l.name.ends_with(".zeroise"))
        .collect();
    let zero_ops: u64 = zeroise
        .iter()
        .map(|l| l.float_ops + l.binary_ops + l.params_float + l.params_binary_bits + l.betas)
        .sum();
    if zeroise.len() != 8 * 8 || zero_ops != 0 {
        bad.push(format!("{} Zeroise edges cost {zero_ops}", zeroise.len()));
    }
    let conv = NetworkSpec::new(uniform_genotype(LayerType::BinConv3x3, 4), 8, 16);
    let mut mixed_g = uniform_genotype(LayerType::BinConv3x3, 4);
    for node in mixed_g.normal.iter_mut().chain(mixed_g.reduce.iter_mut()) {
        node.edges[0].op = LayerType::Zeroise;
    }
    let mixed = NetworkSpec::new(mixed_g, 8, 16);
    let (m0, m1) = (
        memory_savings_against(&conv, &conv).unwrap(),
        memory_savings_against(&mixed, &conv).unwrap(),
    );
    let (s0, s1) = (
        inference_speedup_against(&conv, &conv).unwrap(),
        inference_speedup_against(&mixed, &conv).unwrap(),
    );
    if !(m1 > m0 && s1 > s0) {
        bad.push(format!(
            "savings {m0:.2} -> {m1:.2}, speedup {s0:.2} -> {s1:.2}"
        ));
    }
    if bad.is_empty() {
        pass(format!(
            "3x3 16->16 32x32 = 2359296 binary MACs; 64 Zeroise edges cost 0; savings {m0:.2}x -> {m1:.2}x, speedup {s0:.2}x -> {s1:.2}x"
        ))
    } else {
        fail(bad.join("; "))
    }
}

fn c8_end_to_end() -> Outcome {
    let data = synthetic(32, 3, 8, 10, 8);
    let cfg = SearchConfig {
        epochs: 1,
        batch: 8,
        cells: 3,
        channels: 4,
        seed: 7,
        ..SearchConfig::default()
    };
    let a = search_and_derive(&cfg, &data, 1.0);
    let b = search_and_derive(&cfg, &data, 1.0);
    let (a, b) = match (a, b) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return fail(e.to_string()),
    };
    let roundtrip = Genotype::from_json(&a.to_json());
    let part = format!(
        "tiny synthetic search(seed 7) -> derive(gamma=1) twice: identical={}, schema-valid={}",
        a.to_json() == b.to_json(),
        roundtrip.is_ok()
    );
    if a.to_json() != b.to_json() || roundtrip.is_err() || a.validate().is_err() {
        return fail(part);
    }
    let (train_set, test) = match desk_data() {
        Ok(d) => d,
        Err(why) => return blocked(format!("{part}; full CIFAR-10 run: {why}")),
    };
    let cfg = SearchConfig {
        epochs: 15,
        seed: 7,
        ..SearchConfig::default()
    };
    let g1 = search_and_derive(&cfg, &train_set, 1.0);
    let g2 = search_and_derive(&cfg, &train_set, 1.0);
    let (g1, g2) = match (g1, g2) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return fail(e.to_string()),
    };
    if g1.to_json() != g2.to_json() {
        return fail(format!(
            "{part}; CIFAR-10 genotypes differ across same-seed runs"
        ));
    }
    let mut net = build_network(&NetworkSpec::new(g1, 8, 16), 7).unwrap();
    let tc = TrainConfig {
        epochs: 60,
        ..TrainConfig::desk()
    };
    if let Err(e) = train(&mut net, &train_set, None, &tc) {
        return fail(e.to_string());
    }
    match evaluate(&net, &test, tc.batch) {
        Ok(r) => verdict(
            r.top1 >= 50.0,
            format!("{part}; CIFAR-10 test top1 {:.2}", r.top1),
        ),
        Err(e) => fail(e.to_string()),
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("XNOR kernel oracle", c1_xnor),
        ("gradient suite", c2_gradients),
        ("selection and diversity anchors", c3_anchors),
        ("layer-type quantization error direction", c4_quant_error),
        ("inter-cell skip property", c5_skip),
        ("diversity direction", c6_diversity),
        ("FLOPs accounting", c7_flops),
        ("end-to-end determinism and viability", c8_end_to_end),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (status, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            fail(format!("panicked: {msg}"))
        });
        let tag = match status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Blocked => "BLOCKED",
        };
        println!("criterion {} {tag} {name}: {detail}", i + 1);
        if status == Status::Fail {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
