#![allow(dead_code)]

use bnas::autodiff::{Graph, Var};
use bnas::genotype::{EdgeRecord, Genotype, NodeRecord, Provenance, VERSION};
use bnas::space::LayerType;
use bnas::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod grad_suite;
pub mod xnor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: Shape, scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, zero when both vanish.
pub fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let m = na.max(nb);
    if m == 0.0 {
        0.0
    } else {
        d / m
    }
}

/// Loss `sum(out * weights)` built on a fresh training graph from `inputs`.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

pub fn weighted_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

/// Analytic and Richardson-extrapolated central-difference gradients of
/// `build` with respect to every input, flattened in input order.
///
/// Coordinates whose probe points leave the activation pattern of the
/// unperturbed graph straddle a kink, where the difference quotient does not
/// estimate the derivative; they are dropped from both vectors and counted.
pub struct GradientPair {
    pub analytic: Vec<f32>,
    pub numeric: Vec<f32>,
    pub kinked: usize,
    pub total: usize,
}

pub fn gradient_pair(inputs: &[Tensor], build: &Build, eps: f32) -> GradientPair {
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let base = g.activation_pattern();
    let mut analytic_all = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(gr) => analytic_all.extend_from_slice(gr.data()),
            None => analytic_all.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    let eval = |ins: &[Tensor]| -> (f64, bool) {
        let mut g = Graph::new(true);
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let l = build(&mut g, &vars);
        (g.value(l).data()[0] as f64, g.activation_pattern() == base)
    };
    let mut out = GradientPair {
        analytic: Vec::new(),
        numeric: Vec::new(),
        kinked: 0,
        total: analytic_all.len(),
    };
    let mut flat = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let probe = |h: f32| {
                let mut ins = inputs.to_vec();
                ins[i].data_mut()[j] += h;
                eval(&ins)
            };
            let pts = [probe(eps), probe(-eps), probe(eps / 2.0), probe(-eps / 2.0)];
            if pts.iter().all(|p| p.1) {
                let full = (pts[0].0 - pts[1].0) / (2.0 * eps as f64);
                let half = (pts[2].0 - pts[3].0) / eps as f64;
                out.numeric.push(((4.0 * half - full) / 3.0) as f32);
                out.analytic.push(analytic_all[flat]);
            } else {
                out.kinked += 1;
            }
            flat += 1;
        }
    }
    out
}

pub fn uniform_genotype(op: LayerType, nodes: usize) -> Genotype {
    let table: Vec<NodeRecord> = (0..nodes)
        .map(|i| NodeRecord {
            node: 2 + i,
            edges: vec![EdgeRecord { from: 0, op }, EdgeRecord { from: 1, op }],
        })
        .collect();
    Genotype {
        version: VERSION,
        gamma: 1.0,
        normal: table.clone(),
        reduce: table,
        provenance: Provenance::default(),
    }
}
