//! Central finite differences against reverse-mode gradients, one function
//! per op family, each over the same seeded instances.

use super::{gradient_pair, rel_err, rng, uniform, weighted_loss, Build};
use bnas::autodiff::{Graph, ParamStore, Var};
use bnas::cell::{mixed_edge_forward, Cell, CellShape, CellTemplate, EdgeSpec};
use bnas::lowering::ConvGeometry;
use bnas::nn::{OpModule, Precision};
use bnas::search::{diversity_coefficient, search_loss, search_loss_graph};
use bnas::space::OpSet;
use bnas::space::{LayerType, SEARCH_SPACE};
use bnas::supernet::ArchParams;
use bnas::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

/// Across all instances of one check, at most this fraction of coordinates
/// may be dropped for straddling a kink.
const MAX_KINKED: f64 = 0.2;

struct Outcome {
    err: f64,
    kinked: usize,
    total: usize,
}

fn check(name: &str, inputs: &[Tensor], build: &Build, eps: f32) -> Outcome {
    let p = gradient_pair(inputs, build, eps);
    let err = rel_err(&p.analytic, &p.numeric);
    assert!(
        p.analytic.iter().any(|v| *v != 0.0),
        "{name}: analytic gradient vanished"
    );
    assert!(err <= TOL, "{name}: relative error {err:.3e}");
    Outcome {
        err,
        kinked: p.kinked,
        total: p.total,
    }
}

/// Distinct values spaced by `gap`, shuffled, so max/ReLU kinks stay far
/// from every perturbation.
fn separated(r: &mut ChaCha8Rng, shape: [usize; 4], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n)
        .map(|i| (i as f32 - n as f32 / 2.0 + 0.5) * gap)
        .collect();
    v.shuffle(r);
    Tensor::new(shape, v).unwrap()
}

/// Worst error and kink count of one check over all instances.
#[derive(Clone, Debug)]
pub struct Summary {
    pub name: String,
    pub worst: f64,
    pub kinked: usize,
    pub total: usize,
}

fn each_instance(name: &str, mut f: impl FnMut(&mut ChaCha8Rng) -> Outcome) -> Summary {
    let (mut worst, mut kinked, mut total) = (0.0f64, 0, 0);
    for i in 0..INSTANCES {
        let mut r = rng(1000 + i);
        let o = f(&mut r);
        worst = worst.max(o.err);
        kinked += o.kinked;
        total += o.total;
    }
    assert!(
        kinked as f64 <= MAX_KINKED * total as f64,
        "{name}: {kinked} of {total} coordinates straddle a kink"
    );
    Summary {
        name: name.to_string(),
        worst,
        kinked,
        total,
    }
}

pub fn conv2d_plain_strided_dilated_grouped() -> Vec<Summary> {
    vec![each_instance("conv2d", |r| {
        let k = *[1usize, 3, 5].choose(r).unwrap();
        let stride = r.gen_range(1..=2);
        let dil = if k == 1 { 1 } else { r.gen_range(1..=2) };
        let groups = *[1usize, 2].choose(r).unwrap();
        let c = 2 * r.gen_range(1..=2);
        let f = 2 * r.gen_range(1..=2);
        let geom = ConvGeometry::same(k, stride, dil);
        let x = uniform(r, [2, c, 5, 5], 1.0);
        let w = uniform(r, [f, c / groups, k, k], 1.0);
        let out_shape = bnas::conv::conv_output_shape(x.shape(), w.shape(), &geom, groups).unwrap();
        let wts = uniform(r, out_shape, 1.0);
        check(
            "conv2d",
            &[x, w],
            &|g: &mut Graph, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], geom, groups).unwrap();
                weighted_loss(g, y, &wts)
            },
            1e-2,
        )
    })]
}

/// Conv, ReLU, conv: gradient with respect to the input and both filters.
pub fn two_layer_conv_net() -> Vec<Summary> {
    vec![each_instance("two_layer_conv", |r| {
        let geom = ConvGeometry::same(3, 1, 1);
        let x = separated(r, [2, 2, 5, 5], 0.03);
        let w1 = uniform(r, [3, 2, 3, 3], 1.0);
        let w2 = uniform(r, [2, 3, 3, 3], 1.0);
        let wts = uniform(r, [2, 2, 5, 5], 1.0);
        check(
            "two_layer_conv",
            &[x, w1, w2],
            &|g: &mut Graph, v: &[Var]| {
                let h = g.conv2d(v[0], v[1], geom, 1).unwrap();
                let h = g.relu(h).unwrap();
                let y = g.conv2d(h, v[2], geom, 1).unwrap();
                weighted_loss(g, y, &wts)
            },
            1e-2,
        )
    })]
}

pub fn linear_layer() -> Vec<Summary> {
    vec![each_instance("linear", |r| {
        let x = uniform(r, [3, 5, 1, 1], 1.0);
        let w = uniform(r, [4, 5, 1, 1], 1.0);
        let b = uniform(r, [1, 4, 1, 1], 1.0);
        let wts = uniform(r, [3, 4, 1, 1], 1.0);
        check(
            "linear",
            &[x, w, b],
            &|g: &mut Graph, v: &[Var]| {
                let y = g.linear(v[0], v[1], v[2]).unwrap();
                weighted_loss(g, y, &wts)
            },
            1e-2,
        )
    })]
}

pub fn batch_norm_train_mode() -> Vec<Summary> {
    vec![each_instance("batch_norm", |r| {
        let x = uniform(r, [3, 2, 3, 3], 2.0);
        let gamma = uniform(r, [1, 2, 1, 1], 1.5);
        let beta = uniform(r, [1, 2, 1, 1], 1.0);
        let wts = uniform(r, [3, 2, 3, 3], 1.0);
        let rm = Tensor::zeros([1, 2, 1, 1]);
        let rv = Tensor::full([1, 2, 1, 1], 1.0);
        check(
            "batch_norm",
            &[x, gamma, beta],
            &|g: &mut Graph, v: &[Var]| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &rm, &rv).unwrap();
                weighted_loss(g, y, &wts)
            },
            3e-3,
        )
    })]
}

pub fn relu_and_pools() -> Vec<Summary> {
    let mut out = vec![each_instance("relu", |r| {
        let x = separated(r, [2, 2, 4, 4], 0.05);
        let wts = uniform(r, [2, 2, 4, 4], 1.0);
        check(
            "relu",
            &[x],
            &|g: &mut Graph, v: &[Var]| {
                let y = g.relu(v[0]).unwrap();
                weighted_loss(g, y, &wts)
            },
            1e-2,
        )
    })];
    for stride in [1, 2] {
        out.push(each_instance("max_pool", |r| {
            let x = separated(r, [2, 2, 5, 5], 0.05);
            let geom = ConvGeometry::new(3, stride, 1, 1);
            let (oh, ow) = geom.output_hw(5, 5).unwrap();
            let wts = uniform(r, [2, 2, oh, ow], 1.0);
            check(
                "max_pool",
                &[x],
                &|g: &mut Graph, v: &[Var]| {
                    let y = g.max_pool(v[0], geom).unwrap();
                    weighted_loss(g, y, &wts)
                },
                1e-2,
            )
        }));
        out.push(each_instance("avg_pool", |r| {
            let x = uniform(r, [2, 2, 5, 5], 1.0);
            let geom = ConvGeometry::new(3, stride, 1, 1);
            let (oh, ow) = geom.output_hw(5, 5).unwrap();
            let wts = uniform(r, [2, 2, oh, ow], 1.0);
            check(
                "avg_pool",
                &[x],
                &|g: &mut Graph, v: &[Var]| {
                    let y = g.avg_pool(v[0], geom).unwrap();
                    weighted_loss(g, y, &wts)
                },
                1e-2,
            )
        }));
    }
    out.push(each_instance("global_avg_pool", |r| {
        let x = uniform(r, [2, 3, 4, 4], 1.0);
        let wts = uniform(r, [2, 3, 1, 1], 1.0);
        check(
            "global_avg_pool",
            &[x],
            &|g: &mut Graph, v: &[Var]| {
                let y = g.global_avg_pool(v[0]).unwrap();
                weighted_loss(g, y, &wts)
            },
            1e-2,
        )
    }));
    out
}

pub fn structural_ops() -> Vec<Summary> {
    vec![each_instance("concat_pad_reshape_lin_comb_mul", |r| {
        let a = uniform(r, [2, 2, 3, 3], 1.0);
        let b = uniform(r, [2, 1, 3, 3], 1.0);
        let c = uniform(r, [2, 3, 3, 3], 1.0);
        let coeffs = [r.gen_range(-2.0..2.0f32), r.gen_range(-2.0..2.0f32)];
        let wts = uniform(r, [2, 5, 3, 3], 1.0);
        check(
            "concat_pad_reshape_lin_comb_mul",
            &[a, b, c],
            &|g: &mut Graph, v: &[Var]| {
                let cat = g.concat(&[v[0], v[1]]).unwrap();
                let m = g.mul(cat, v[2]).unwrap();
                let lc = g.lin_comb(&[m, cat], &coeffs).unwrap();
                let p = g.channel_pad(lc, 5).unwrap();
                let flat = g.reshape(p, [2, 45, 1, 1]).unwrap();
                let back = g.reshape(flat, [2, 5, 3, 3]).unwrap();
                weighted_loss(g, back, &wts)
            },
            1e-2,
        )
    })]
}

pub fn softmax_entropy_cross_entropy() -> Vec<Summary> {
    vec![
        each_instance("row_softmax_entropy", |r| {
            let alpha = uniform(r, [4, 7, 1, 1], 2.0);
            let wts = uniform(r, [4, 7, 1, 1], 1.0);
            check(
                "row_softmax_entropy",
                &[alpha],
                &|g: &mut Graph, v: &[Var]| {
                    let p = g.row_softmax(v[0]).unwrap();
                    let h = g.entropy(p).unwrap();
                    let l = weighted_loss(g, p, &wts);
                    g.add(l, h).unwrap()
                },
                1e-2,
            )
        }),
        each_instance("softmax_cross_entropy", |r| {
            let logits = uniform(r, [4, 6, 1, 1], 3.0);
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..6)).collect();
            check(
                "softmax_cross_entropy",
                &[logits],
                &|g: &mut Graph, v: &[Var]| g.softmax_cross_entropy(v[0], &labels).unwrap(),
                3e-3,
            )
        }),
    ]
}

/// Float-precision candidate ops of every layer type on one mixed edge;
/// gradient with respect to the input and the architecture logits.
pub fn mixed_edge() -> Vec<Summary> {
    vec![each_instance("mixed_edge", |r| {
        let mut store = ParamStore::new();
        let ops: Vec<OpModule> = SEARCH_SPACE
            .iter()
            .map(|&t| {
                OpModule::new(
                    &mut store,
                    &format!("op{}", t.id()),
                    t,
                    2,
                    1,
                    Precision::Float,
                    r,
                )
            })
            .collect();
        let x = separated(r, [2, 2, 6, 6], 0.03);
        let alpha = uniform(r, [3, SEARCH_SPACE.len(), 1, 1], 1.0);
        let row = r.gen_range(0..3);
        let wts = uniform(r, [2, 2, 6, 6], 1.0);
        check(
            "mixed_edge",
            &[x, alpha],
            &|g: &mut Graph, v: &[Var]| {
                let p = g.row_softmax(v[1]).unwrap();
                let y = mixed_edge_forward(g, &store, p, row, &ops, v[0]).unwrap();
                weighted_loss(g, y, &wts)
            },
            1e-2,
        )
    })]
}

/// A whole mixed cell in float precision, normal and reduction, with and
/// without the inter-cell skip.
pub fn cell_forward() -> Vec<Summary> {
    vec![each_instance("cell_forward", |r| {
        let reduction = r.gen_bool(0.5);
        let skip = r.gen_bool(0.5);
        let template = CellTemplate::new(2);
        let ops = vec![
            LayerType::BinConv3x3,
            LayerType::BinDilConv3x3,
            LayerType::AvgPool3x3,
            LayerType::Zeroise,
        ];
        let edges: Vec<EdgeSpec> = template
            .edges()
            .into_iter()
            .enumerate()
            .map(|(row, (node, from))| EdgeSpec {
                node,
                from,
                row,
                ops: ops.clone(),
            })
            .collect();
        let mut store = ParamStore::new();
        let cell = Cell::new(
            &mut store,
            CellShape {
                index: 0,
                c_prev_prev: 2,
                c_prev: 2,
                channels: 2,
                reduction,
                reduction_prev: false,
                nodes: 2,
                precision: Precision::Float,
                skip,
                mixed: true,
            },
            &edges,
            r,
        )
        .unwrap();
        let s0 = uniform(r, [2, 2, 4, 4], 1.0);
        let s1 = uniform(r, [2, 2, 4, 4], 1.0);
        let alpha = uniform(r, [template.edge_count(), ops.len(), 1, 1], 1.0);
        let hw = if reduction { 2 } else { 4 };
        let wts = uniform(r, [2, 4, hw, hw], 1.0);
        check(
            "cell_forward",
            &[s0, s1, alpha],
            &|g: &mut Graph, v: &[Var]| {
                let p = g.row_softmax(v[2]).unwrap();
                let y = cell.forward(g, &store, v[0], v[1], Some(p)).unwrap();
                weighted_loss(g, y, &wts)
            },
            1e-2,
        )
    })]
}

fn softmax64(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Scalar f64 evaluation of the search objective built in the graph below.
struct ScalarObjective {
    edges: usize,
    ops: usize,
    heads: Vec<Tensor>,
    labels: Vec<usize>,
    rows: [usize; 2],
    coeff: f64,
}

impl ScalarObjective {
    /// `theta` is the normal table followed by the reduction table.
    fn eval(&self, theta: &[f64]) -> f64 {
        let k = self.ops;
        let tables: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|t| {
                (0..self.edges)
                    .map(|e| {
                        softmax64(&theta[(t * self.edges + e) * k..(t * self.edges + e + 1) * k])
                    })
                    .collect()
            })
            .collect();
        let [n, classes, _, _] = self.heads[0].shape();
        let mut ce = 0.0;
        for i in 0..n {
            let z: Vec<f64> = (0..classes)
                .map(|c| {
                    (0..2)
                        .map(|t| {
                            (0..k)
                                .map(|o| {
                                    tables[t][self.rows[t]][o]
                                        * self.heads[o].data()[i * classes + c] as f64
                                })
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ce += lse - z[self.labels[i]];
        }
        ce /= n as f64;
        let h: f64 = tables.iter().flatten().flatten().map(|p| -p * p.ln()).sum();
        ce - self.coeff * h
    }
}

/// Cross-entropy that depends on both tables through mixed sums, minus the
/// annealed entropy bonus. The single-precision difference quotient of this
/// objective is dominated by rounding of the entropy sums, so the reverse-mode
/// gradient is compared with an f64 scalar evaluation instead.
pub fn search_loss_wrt_arch() -> Vec<Summary> {
    vec![each_instance("search_loss", |r| {
        let k = SEARCH_SPACE.len();
        let template = CellTemplate::default();
        let e = template.edge_count();
        let an = uniform(r, [e, k, 1, 1], 1.5);
        let ar = uniform(r, [e, k, 1, 1], 1.5);
        let heads: Vec<Tensor> = (0..k).map(|_| uniform(r, [3, 5, 1, 1], 2.0)).collect();
        let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..5)).collect();
        let (row_n, row_r) = (r.gen_range(0..e), r.gen_range(0..e));
        let t = r.gen_range(0.0..20.0);
        let coeff = diversity_coefficient(1.0, 7.7, t);

        let mut g = Graph::new(true);
        let vars = [g.leaf(an.clone(), true), g.leaf(ar.clone(), true)];
        let pn = g.row_softmax(vars[0]).unwrap();
        let pr = g.row_softmax(vars[1]).unwrap();
        let hs: Vec<Var> = heads.iter().map(|h| g.constant(h.clone())).collect();
        let zn = g.mixed_sum(pn, row_n, &hs).unwrap();
        let zr = g.mixed_sum(pr, row_r, &hs).unwrap();
        let z = g.add(zn, zr).unwrap();
        let ce = g.softmax_cross_entropy(z, &labels).unwrap();
        let total = search_loss_graph(&mut g, ce, [pn, pr], coeff).unwrap();
        let grads = g.backward(total).unwrap();
        let analytic: Vec<f32> = vars
            .iter()
            .flat_map(|v| grads.get(*v).unwrap().data().to_vec())
            .collect();

        // graph value agrees with the scalar objective and with `search_loss`
        let mut arch = ArchParams::new(template, OpSet::new(SEARCH_SPACE.to_vec()).unwrap());
        arch.alpha_mut(false).data_mut().copy_from_slice(an.data());
        arch.alpha_mut(true).data_mut().copy_from_slice(ar.data());
        let want = search_loss(g.value(ce).data()[0] as f64, &arch, 1.0, 7.7, t);
        let got = g.value(total).data()[0] as f64;
        assert!(
            (got - want).abs() <= 1e-4 * want.abs().max(1.0),
            "{got} vs {want}"
        );
        let obj = ScalarObjective {
            edges: e,
            ops: k,
            heads,
            labels,
            rows: [row_n, row_r],
            coeff,
        };
        let theta: Vec<f64> = an
            .data()
            .iter()
            .chain(ar.data())
            .map(|v| *v as f64)
            .collect();
        let scalar = obj.eval(&theta);
        assert!(
            (got - scalar).abs() <= 1e-4 * scalar.abs().max(1.0),
            "{got} vs {scalar}"
        );

        let h = 1e-5;
        let numeric: Vec<f32> = (0..theta.len())
            .map(|i| {
                let mut p = theta.clone();
                p[i] += h;
                let mut m = theta.clone();
                m[i] -= h;
                ((obj.eval(&p) - obj.eval(&m)) / (2.0 * h)) as f32
            })
            .collect();
        let err = rel_err(&analytic, &numeric);
        assert!(err <= TOL, "search_loss: relative error {err:.3e}");
        Outcome {
            err,
            kinked: 0,
            total: theta.len(),
        }
    })]
}

/// Every check of the suite in a fixed order.
pub fn all() -> Vec<Summary> {
    let groups: [fn() -> Vec<Summary>; 10] = [
        conv2d_plain_strided_dilated_grouped,
        two_layer_conv_net,
        linear_layer,
        batch_norm_train_mode,
        relu_and_pools,
        structural_ops,
        softmax_entropy_cross_entropy,
        mixed_edge,
        cell_forward,
        search_loss_wrt_arch,
    ];
    groups.iter().flat_map(|f| f()).collect()
}
