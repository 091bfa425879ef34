//! Discrete architectures derived from architecture tables, and their JSON
//! form.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cell::CellTemplate;
use crate::error::{Error, Result};
use crate::space::{LayerType, OpSet};
use crate::supernet::ArchParams;

/// Version for genotypes over the default seven-op space.
pub const VERSION: u32 = 1;
/// Version for genotypes searched with separable convolutions kept.
pub const VERSION_SEPCONV: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Genotype {
    pub version: u32,
    pub gamma: f64,
    pub normal: Vec<NodeRecord>,
    pub reduce: Vec<NodeRecord>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeRecord {
    pub node: usize,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeRecord {
    pub from: usize,
    pub op: LayerType,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

fn gamma_ok(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gamma must be positive, got {gamma}"
        )))
    }
}

/// Op chosen for one edge and the strength used to rank it.
///
/// Zeroise wins only if `p_z / gamma` strictly exceeds every other
/// probability; among the rest the lowest op index wins ties.
pub fn select_op(probs: &[f64], ops: &OpSet, gamma: f64) -> Result<(LayerType, f64)> {
    gamma_ok(gamma)?;
    if probs.len() != ops.len() {
        return Err(Error::Contract(format!(
            "{} probabilities for {} ops",
            probs.len(),
            ops.len()
        )));
    }
    let z = ops.zeroise_index();
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in probs.iter().enumerate() {
        if Some(i) == z {
            continue;
        }
        if best.map_or(true, |(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    match (z, best) {
        (Some(zi), Some((_, bp))) if probs[zi] / gamma > bp => {
            Ok((LayerType::Zeroise, probs[zi] / gamma))
        }
        (_, Some((i, bp))) => Ok((ops.ops()[i], bp)),
        (Some(zi), None) => Ok((LayerType::Zeroise, probs[zi] / gamma)),
        (None, None) => unreachable!("op sets are never empty"),
    }
}

fn derive_table(
    probs: &[Vec<f64>],
    template: &CellTemplate,
    ops: &OpSet,
    gamma: f64,
) -> Result<Vec<NodeRecord>> {
    let edges = template.edges();
    let mut nodes = Vec::with_capacity(template.nodes);
    for node in 2..2 + template.nodes {
        let mut cand = Vec::new();
        for (row, &(n, from)) in edges.iter().enumerate() {
            if n == node {
                let (op, strength) = select_op(&probs[row], ops, gamma)?;
                cand.push((from, op, strength));
            }
        }
        assert!(cand.len() >= 2, "template gives every node two inputs");
        cand.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut kept: Vec<EdgeRecord> = cand[..2]
            .iter()
            .map(|&(from, op, _)| EdgeRecord { from, op })
            .collect();
        kept.sort_by_key(|e| e.from);
        nodes.push(NodeRecord { node, edges: kept });
    }
    Ok(nodes)
}

/// Keeps, per node, the two incoming edges of greatest selection strength
/// (ties to the lowest source). Zeroise edges are kept as real ops.
pub fn derive(arch: &ArchParams, gamma: f64, provenance: Provenance) -> Result<Genotype> {
    gamma_ok(gamma)?;
    let normal = derive_table(&arch.probs(false), &arch.template, &arch.ops, gamma)?;
    let reduce = derive_table(&arch.probs(true), &arch.template, &arch.ops, gamma)?;
    let version = if arch.ops.ops().iter().any(|t| t.is_sep_conv()) {
        VERSION_SEPCONV
    } else {
        VERSION
    };
    Ok(Genotype {
        version,
        gamma,
        normal,
        reduce,
        provenance,
    })
}

/// Fraction of edges across both cells whose op is `t`.
pub fn op_proportion(g: &Genotype, t: LayerType) -> f64 {
    let all: Vec<LayerType> = g
        .normal
        .iter()
        .chain(&g.reduce)
        .flat_map(|n| n.edges.iter().map(|e| e.op))
        .collect();
    if all.is_empty() {
        return 0.0;
    }
    all.iter().filter(|&&o| o == t).count() as f64 / all.len() as f64
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    from: usize,
    op: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    node: usize,
    edges: Vec<RawEdge>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenotype {
    version: u32,
    gamma: f64,
    normal: Vec<RawNode>,
    reduce: Vec<RawNode>,
    provenance: Provenance,
}

fn field_err(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Genotype {
        field: field.into(),
        msg: msg.into(),
    }
}

fn check_table(nodes: &[NodeRecord], name: &str, version: u32) -> Result<()> {
    if nodes.is_empty() {
        return Err(field_err(name, "no nodes"));
    }
    for (i, n) in nodes.iter().enumerate() {
        let at = format!("{name}[{i}]");
        if n.node != 2 + i {
            return Err(field_err(
                format!("{at}.node"),
                format!("expected node {}, found {}", 2 + i, n.node),
            ));
        }
        if n.edges.len() != 2 {
            return Err(field_err(
                format!("{at}.edges"),
                format!("expected 2 edges, found {}", n.edges.len()),
            ));
        }
        if n.edges[0].from == n.edges[1].from {
            return Err(field_err(format!("{at}.edges"), "duplicate source"));
        }
        for (j, e) in n.edges.iter().enumerate() {
            if e.from >= n.node {
                return Err(field_err(
                    format!("{at}.edges[{j}].from"),
                    format!("source {} is not earlier than node {}", e.from, n.node),
                ));
            }
            if e.op.is_sep_conv() && version != VERSION_SEPCONV {
                return Err(field_err(
                    format!("{at}.edges[{j}].op"),
                    format!("`{}` requires version {}", e.op, VERSION_SEPCONV),
                ));
            }
        }
    }
    Ok(())
}

fn convert_table(raw: Vec<RawNode>, name: &str) -> Result<Vec<NodeRecord>> {
    raw.into_iter()
        .enumerate()
        .map(|(i, n)| {
            let edges = n
                .edges
                .into_iter()
                .enumerate()
                .map(|(j, e)| {
                    let op = e.op.parse::<LayerType>().map_err(|_| {
                        field_err(
                            format!("{name}[{i}].edges[{j}].op"),
                            format!("unknown op `{}`", e.op),
                        )
                    })?;
                    Ok(EdgeRecord { from: e.from, op })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(NodeRecord {
                node: n.node,
                edges,
            })
        })
        .collect()
}

impl Genotype {
    /// Structural checks shared by parsing and network building.
    pub fn validate(&self) -> Result<()> {
        if self.version != VERSION && self.version != VERSION_SEPCONV {
            return Err(field_err(
                "version",
                format!("unsupported version {}", self.version),
            ));
        }
        gamma_ok(self.gamma).map_err(|e| field_err("gamma", e.to_string()))?;
        check_table(&self.normal, "normal", self.version)?;
        check_table(&self.reduce, "reduce", self.version)?;
        if self.normal.len() != self.reduce.len() {
            return Err(field_err("reduce", "node count differs from normal"));
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.normal.len()
    }

    pub fn ops(&self) -> impl Iterator<Item = LayerType> + '_ {
        self.normal
            .iter()
            .chain(&self.reduce)
            .flat_map(|n| n.edges.iter().map(|e| e.op))
    }

    pub fn contains(&self, t: LayerType) -> bool {
        self.ops().any(|o| o == t)
    }

    pub fn to_json(&self) -> String {
        let table = |nodes: &[NodeRecord]| -> Vec<RawNode> {
            nodes
                .iter()
                .map(|n| RawNode {
                    node: n.node,
                    edges: n
                        .edges
                        .iter()
                        .map(|e| RawEdge {
                            from: e.from,
                            op: e.op.name().to_string(),
                        })
                        .collect(),
                })
                .collect()
        };
        let raw = RawGenotype {
            version: self.version,
            gamma: self.gamma,
            normal: table(&self.normal),
            reduce: table(&self.reduce),
            provenance: self.provenance.clone(),
        };
        serde_json::to_string(&raw).expect("genotype serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawGenotype = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("<document>")
                .to_string();
            field_err(field, msg)
        })?;
        let g = Genotype {
            version: raw.version,
            gamma: raw.gamma,
            normal: convert_table(raw.normal, "normal")?,
            reduce: convert_table(raw.reduce, "reduce")?,
            provenance: raw.provenance,
        };
        g.validate()?;
        Ok(g)
    }
}
