//! The continuously relaxed search network and its architecture tables.

use crate::autodiff::{Graph, ParamId, ParamKind, ParamStore, Var};
use crate::cell::{Body, BodyShape, CellTemplate, EdgeSpec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Precision;
use crate::space::{LayerType, OpSet, SpaceFlags};
use crate::tensor::Tensor;

/// Architecture logits for normal and reduction cells, each `(edges, ops, 1, 1)`.
#[derive(Clone, Debug)]
pub struct ArchParams {
    pub store: ParamStore,
    pub normal: ParamId,
    pub reduce: ParamId,
    pub ops: OpSet,
    pub template: CellTemplate,
}

impl ArchParams {
    /// Zero logits, i.e. uniform distributions.
    pub fn new(template: CellTemplate, ops: OpSet) -> Self {
        let mut store = ParamStore::new();
        let shape = [template.edge_count(), ops.len(), 1, 1];
        let normal = store.add("alpha_normal", ParamKind::Arch, Tensor::zeros(shape));
        let reduce = store.add("alpha_reduce", ParamKind::Arch, Tensor::zeros(shape));
        ArchParams {
            store,
            normal,
            reduce,
            ops,
            template,
        }
    }

    pub fn alpha(&self, reduction: bool) -> &Tensor {
        self.store
            .value(if reduction { self.reduce } else { self.normal })
    }

    pub fn alpha_mut(&mut self, reduction: bool) -> &mut Tensor {
        let id = if reduction { self.reduce } else { self.normal };
        &mut self.store.get_mut(id).value
    }

    /// Self-describing JSON: op names, node count, and both logit tables.
    pub fn to_json(&self, seed: u64, config_hash: &str) -> String {
        let snap = ArchSnapshot {
            ops: self
                .ops
                .ops()
                .iter()
                .map(|o| o.name().to_string())
                .collect(),
            nodes: self.template.nodes,
            seed,
            config_hash: config_hash.to_string(),
            normal: self.alpha(false).data().to_vec(),
            reduce: self.alpha(true).data().to_vec(),
        };
        serde_json::to_string_pretty(&snap).expect("plain data serializes")
    }

    /// Inverse of [`ArchParams::to_json`]; returns the params and the seed.
    pub fn from_json(text: &str) -> Result<(Self, u64)> {
        let bad = |msg: String| Error::Format {
            path: "<arch json>".into(),
            msg,
        };
        let snap: ArchSnapshot = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let ops = snap
            .ops
            .iter()
            .map(|n| n.parse::<LayerType>())
            .collect::<Result<Vec<_>>>()?;
        let mut arch = ArchParams::new(CellTemplate::new(snap.nodes), OpSet::new(ops)?);
        for (reduction, table) in [(false, snap.normal), (true, snap.reduce)] {
            let t = arch.alpha_mut(reduction);
            if t.data().len() != table.len() {
                return Err(bad(format!(
                    "table has {} logits, expected {}",
                    table.len(),
                    t.data().len()
                )));
            }
            t.data_mut().copy_from_slice(&table);
        }
        Ok((arch, snap.seed))
    }

    /// Row-softmax of one table, computed in f64.
    pub fn probs(&self, reduction: bool) -> Vec<Vec<f64>> {
        let a = self.alpha(reduction);
        let k = self.ops.len();
        a.data().chunks(k).map(softmax_row).collect()
    }

    /// Softmax tables as graph nodes: `[normal, reduce]`.
    pub fn prob_vars(&self, g: &mut Graph) -> Result<[Var; 2]> {
        let an = g.param(&self.store, self.normal);
        let ar = g.param(&self.store, self.reduce);
        Ok([g.row_softmax(an)?, g.row_softmax(ar)?])
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchSnapshot {
    ops: Vec<String>,
    nodes: usize,
    seed: u64,
    config_hash: String,
    normal: Vec<f32>,
    reduce: Vec<f32>,
}

pub fn softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Everything needed to build a supernet.
#[derive(Clone, Debug)]
pub struct SuperNetSpec {
    pub cells: usize,
    pub channels: usize,
    pub flags: SpaceFlags,
    pub ops: OpSet,
    pub template: CellTemplate,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Precision of every candidate convolution.
    pub precision: Precision,
}

impl SuperNetSpec {
    pub fn new(cells: usize, channels: usize, flags: SpaceFlags) -> Result<Self> {
        Ok(SuperNetSpec {
            cells,
            channels,
            flags,
            ops: OpSet::from_flags(&flags)?,
            template: CellTemplate::default(),
            in_channels: 3,
            num_classes: 10,
            precision: Precision::Binary,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuperNet {
    pub spec: SuperNetSpec,
    pub weights: ParamStore,
    pub arch: ArchParams,
    pub body: Body,
}

pub fn build_supernet(spec: &SuperNetSpec, seed: u64) -> Result<SuperNet> {
    let mut rng = crate::rng::substream(seed, crate::rng::STREAM_INIT);
    let mut weights = ParamStore::new();
    let template = spec.template;
    let ops = spec.ops.ops().to_vec();
    let edges = move |_reduction: bool| -> Vec<EdgeSpec> {
        template
            .edges()
            .into_iter()
            .enumerate()
            .map(|(row, (node, from))| EdgeSpec {
                node,
                from,
                row,
                ops: ops.clone(),
            })
            .collect()
    };
    let body = Body::new(
        &mut weights,
        BodyShape {
            cells: spec.cells,
            channels: spec.channels,
            in_channels: spec.in_channels,
            num_classes: spec.num_classes,
            nodes: template.nodes,
            precision: spec.precision,
            skip: !spec.flags.no_skip,
            mixed: true,
        },
        &edges,
        &mut rng,
    )?;
    Ok(SuperNet {
        spec: spec.clone(),
        weights,
        arch: ArchParams::new(template, spec.ops.clone()),
        body,
    })
}

impl SuperNet {
    /// Logits and the two probability tables used to produce them.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, [Var; 2])> {
        let probs = self.arch.prob_vars(g)?;
        let logits = self.body.forward(g, &self.weights, x, Some(probs))?;
        Ok((logits, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::LayerType;

    #[test]
    fn uniform_initial_rows() {
        let a = ArchParams::new(
            CellTemplate::default(),
            OpSet::from_flags(&SpaceFlags::default()).unwrap(),
        );
        for table in [false, true] {
            let p = a.probs(table);
            assert_eq!(p.len(), 14);
            for row in p {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn supernet_reductions_and_parameter_free_ops() {
        let spec = SuperNetSpec::new(8, 16, SpaceFlags::default()).unwrap();
        let net = build_supernet(&spec, 0).unwrap();
        let red: Vec<usize> = net
            .body
            .cells
            .iter()
            .filter(|c| c.reduction)
            .map(|c| c.index)
            .collect();
        assert_eq!(red, vec![2, 5]);
        assert_eq!(net.body.cells[2].channels, 32);
        assert_eq!(net.body.cells[5].channels, 64);

        // removing the three parameter-free ops leaves the count unchanged
        let only_param = SuperNetSpec {
            ops: OpSet::new(vec![
                LayerType::BinConv3x3,
                LayerType::BinConv5x5,
                LayerType::BinDilConv3x3,
                LayerType::BinDilConv5x5,
            ])
            .unwrap(),
            ..spec.clone()
        };
        let net2 = build_supernet(&only_param, 0).unwrap();
        assert_eq!(
            net.weights.trainable_count(),
            net2.weights.trainable_count()
        );
    }

    #[test]
    fn small_supernet_forward_shape() {
        let spec = SuperNetSpec::new(3, 4, SpaceFlags::default()).unwrap();
        let net = build_supernet(&spec, 1).unwrap();
        let mut g = Graph::new(true);
        let x = g.constant(Tensor::full([2, 3, 8, 8], 0.5));
        let (logits, _) = net.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(logits), [2, 10, 1, 1]);
    }

    #[test]
    fn json_round_trip() {
        let flags = SpaceFlags {
            keep_sepconv: true,
            ..SpaceFlags::default()
        };
        let mut a = ArchParams::new(CellTemplate::default(), OpSet::from_flags(&flags).unwrap());
        a.alpha_mut(true).data_mut()[3] = 1.5;
        let (b, seed) = ArchParams::from_json(&a.to_json(9, "abc")).unwrap();
        assert_eq!(seed, 9);
        assert_eq!(b.ops, a.ops);
        assert_eq!(b.alpha(true), a.alpha(true));
        assert!(ArchParams::from_json("{}").is_err());
    }
}
