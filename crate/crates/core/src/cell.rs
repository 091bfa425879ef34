//! Cell template, mixed edges, the parameter-free skip adapter, and the
//! stem -> cells -> classifier body shared by searched and derived networks.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{contract, geometry, Result};
use crate::lowering::ConvGeometry;
use crate::nn::{ConvBlock, Linear, OpModule, Precision, Stem};
use crate::space::LayerType;
use crate::tensor::Shape;

pub const DEFAULT_NODES: usize = 4;
pub const STEM_MULTIPLIER: usize = 3;

/// Wiring of a cell: node ids 0 and 1 are the cell inputs, intermediate
/// nodes are numbered from 2 and each receives one edge from every earlier
/// node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellTemplate {
    pub nodes: usize,
}

impl Default for CellTemplate {
    fn default() -> Self {
        CellTemplate {
            nodes: DEFAULT_NODES,
        }
    }
}

impl CellTemplate {
    pub fn new(nodes: usize) -> Self {
        CellTemplate { nodes }
    }

    pub fn edge_count(&self) -> usize {
        (0..self.nodes).map(|i| 2 + i).sum()
    }

    /// `(node, from)` pairs in edge (table row) order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.nodes)
            .flat_map(|i| (0..2 + i).map(move |from| (2 + i, from)))
            .collect()
    }

    pub fn edge_index(&self, node: usize, from: usize) -> Option<usize> {
        self.edges().iter().position(|&e| e == (node, from))
    }
}

/// Reduction cells sit at `floor(L/3)` and `floor(2L/3)`.
pub fn reduction_indices(cells: usize) -> [usize; 2] {
    [cells / 3, 2 * cells / 3]
}

pub fn is_reduction(cells: usize, i: usize) -> bool {
    reduction_indices(cells).contains(&i)
}

/// Brings the previous cell output to `target`: 2x2 average pool with stride
/// 2 when the target halves the spatial size, then zero channel padding.
pub fn skip_adapt(g: &mut Graph, x: Var, target: Shape) -> Result<Var> {
    let [n, c, h, w] = g.shape(x);
    if n != target[0] {
        return Err(geometry(format!("skip batch {} vs {}", n, target[0])));
    }
    let x = if (h, w) == (target[2], target[3]) {
        x
    } else if h % 2 == 0 && w % 2 == 0 && (h / 2, w / 2) == (target[2], target[3]) {
        g.avg_pool(x, ConvGeometry::new(2, 2, 1, 0))?
    } else {
        return Err(geometry(format!(
            "skip source {}x{} cannot be adapted to {}x{}",
            h, w, target[2], target[3]
        )));
    };
    if c == target[1] {
        Ok(x)
    } else if c < target[1] {
        g.channel_pad(x, target[1])
    } else {
        Err(geometry(format!(
            "skip source has {} channels, more than the {} of the cell output",
            c, target[1]
        )))
    }
}

/// `sum_o probs[row, o] * op_o(x)`.
pub fn mixed_edge_forward(
    g: &mut Graph,
    store: &ParamStore,
    probs: Var,
    row: usize,
    ops: &[OpModule],
    x: Var,
) -> Result<Var> {
    let outs = ops
        .iter()
        .map(|op| op.forward(g, store, x))
        .collect::<Result<Vec<_>>>()?;
    g.mixed_sum(probs, row, &outs)
}

/// Requested contents of one edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSpec {
    pub node: usize,
    pub from: usize,
    /// Row of the architecture table weighting this edge (mixed cells only).
    pub row: usize,
    pub ops: Vec<LayerType>,
}

#[derive(Clone, Debug)]
pub struct CellEdge {
    pub node: usize,
    pub from: usize,
    pub row: usize,
    pub stride: usize,
    pub types: Vec<LayerType>,
    pub ops: Vec<OpModule>,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub index: usize,
    pub reduction: bool,
    pub reduction_prev: bool,
    pub pre0: ConvBlock,
    pub pre1: ConvBlock,
    pub edges: Vec<CellEdge>,
    pub nodes: usize,
    pub channels: usize,
    pub skip: bool,
    /// Edges are weighted by architecture probabilities.
    pub mixed: bool,
}

/// Construction parameters of one cell.
#[derive(Clone, Copy, Debug)]
pub struct CellShape {
    pub index: usize,
    pub c_prev_prev: usize,
    pub c_prev: usize,
    pub channels: usize,
    pub reduction: bool,
    pub reduction_prev: bool,
    pub nodes: usize,
    pub precision: Precision,
    pub skip: bool,
    pub mixed: bool,
}

impl Cell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        shape: CellShape,
        edges: &[EdgeSpec],
        rng: &mut R,
    ) -> Result<Self> {
        let name = format!("cell{}", shape.index);
        let c = shape.channels;
        let pre0 = ConvBlock::new(
            store,
            &format!("{name}.pre0"),
            shape.c_prev_prev,
            c,
            ConvGeometry::new(1, if shape.reduction_prev { 2 } else { 1 }, 1, 0),
            1,
            shape.precision,
            false,
            rng,
        );
        let pre1 = ConvBlock::new(
            store,
            &format!("{name}.pre1"),
            shape.c_prev,
            c,
            ConvGeometry::new(1, 1, 1, 0),
            1,
            shape.precision,
            false,
            rng,
        );
        let mut built = Vec::with_capacity(edges.len());
        for e in edges {
            if e.node < 2 || e.node >= 2 + shape.nodes || e.from >= e.node {
                return Err(contract(format!(
                    "{name}: edge {} -> {} violates node order",
                    e.from, e.node
                )));
            }
            if e.ops.is_empty() || (!shape.mixed && e.ops.len() != 1) {
                return Err(contract(format!(
                    "{name}: edge {} -> {} has {} ops",
                    e.from,
                    e.node,
                    e.ops.len()
                )));
            }
            let stride = if shape.reduction && e.from < 2 { 2 } else { 1 };
            let ops = e
                .ops
                .iter()
                .map(|&t| {
                    OpModule::new(
                        store,
                        &format!("{name}.e{}_{}.{}", e.from, e.node, t.name()),
                        t,
                        c,
                        stride,
                        shape.precision,
                        rng,
                    )
                })
                .collect();
            built.push(CellEdge {
                node: e.node,
                from: e.from,
                row: e.row,
                stride,
                types: e.ops.clone(),
                ops,
            });
        }
        for node in 2..2 + shape.nodes {
            if !built.iter().any(|e| e.node == node) {
                return Err(contract(format!("{name}: node {node} has no inputs")));
            }
        }
        Ok(Cell {
            index: shape.index,
            reduction: shape.reduction,
            reduction_prev: shape.reduction_prev,
            pre0,
            pre1,
            edges: built,
            nodes: shape.nodes,
            channels: c,
            skip: shape.skip,
            mixed: shape.mixed,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.nodes * self.channels
    }

    /// `probs` is required for mixed cells and ignored otherwise.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s0: Var,
        s1: Var,
        probs: Option<Var>,
    ) -> Result<Var> {
        let p0 = self.pre0.forward(g, store, s0)?;
        let p1 = self.pre1.forward(g, store, s1)?;
        if g.shape(p0) != g.shape(p1) {
            return Err(geometry(format!(
                "cell{}: preprocessed inputs {:?} and {:?} differ",
                self.index,
                g.shape(p0),
                g.shape(p1)
            )));
        }
        let mut states = vec![p0, p1];
        for node in 2..2 + self.nodes {
            let mut terms = Vec::new();
            for e in self.edges.iter().filter(|e| e.node == node) {
                let x = states[e.from];
                let y = if self.mixed {
                    let p = probs.ok_or_else(|| {
                        contract(format!(
                            "cell{} is mixed but got no probabilities",
                            self.index
                        ))
                    })?;
                    mixed_edge_forward(g, store, p, e.row, &e.ops, x)
                } else {
                    e.ops[0].forward(g, store, x)
                }
                .map_err(|err| annotate(err, self.index, e))?;
                terms.push(y);
            }
            let s = g.add_all(&terms)?;
            states.push(s);
        }
        let out = g.concat(&states[2..])?;
        if self.skip {
            let target = g.shape(out);
            let adapted = skip_adapt(g, s1, target)?;
            g.add(out, adapted)
        } else {
            Ok(out)
        }
    }
}

fn annotate(err: crate::Error, cell: usize, e: &CellEdge) -> crate::Error {
    match err {
        crate::Error::InvalidGeometry(m) => crate::Error::InvalidGeometry(format!(
            "cell{} edge {}->{}: {}",
            cell, e.from, e.node, m
        )),
        other => other,
    }
}

/// Stem, stacked cells and classifier.
#[derive(Clone, Debug)]
pub struct Body {
    pub stem: Stem,
    pub cells: Vec<Cell>,
    pub head: Linear,
    pub num_classes: usize,
    pub in_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BodyShape {
    pub cells: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub nodes: usize,
    pub precision: Precision,
    pub skip: bool,
    pub mixed: bool,
}

impl Body {
    /// `edges(reduction)` lists the edges of a normal or reduction cell.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        shape: BodyShape,
        edges: &dyn Fn(bool) -> Vec<EdgeSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        if shape.cells < 3 {
            return Err(crate::Error::Config(format!(
                "need at least 3 cells, got {}",
                shape.cells
            )));
        }
        if shape.channels == 0 || shape.nodes == 0 {
            return Err(crate::Error::Config(
                "channels and nodes must be positive".into(),
            ));
        }
        // capped by the node count so the first skip never has to drop channels
        let c_stem = STEM_MULTIPLIER.min(shape.nodes) * shape.channels;
        let stem = Stem::new(store, shape.in_channels, c_stem, rng);
        let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, shape.channels);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(shape.cells);
        for i in 0..shape.cells {
            let reduction = is_reduction(shape.cells, i);
            if reduction {
                c *= 2;
            }
            let cell = Cell::new(
                store,
                CellShape {
                    index: i,
                    c_prev_prev: c_pp,
                    c_prev: c_p,
                    channels: c,
                    reduction,
                    reduction_prev,
                    nodes: shape.nodes,
                    precision: shape.precision,
                    skip: shape.skip,
                    mixed: shape.mixed,
                },
                &edges(reduction),
                rng,
            )?;
            c_pp = c_p;
            c_p = cell.out_channels();
            reduction_prev = reduction;
            cells.push(cell);
        }
        let head = Linear::new(store, "classifier", c_p, shape.num_classes, rng);
        Ok(Body {
            stem,
            cells,
            head,
            num_classes: shape.num_classes,
            in_channels: shape.in_channels,
        })
    }

    /// Logits `(N, classes, 1, 1)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        probs: Option<[Var; 2]>,
    ) -> Result<Var> {
        let s = self.stem.forward(g, store, x)?;
        let (mut s0, mut s1) = (s, s);
        for cell in &self.cells {
            let p = probs.map(|p| if cell.reduction { p[1] } else { p[0] });
            let out = cell.forward(g, store, s0, s1, p)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = g.global_avg_pool(s1)?;
        self.head.forward(g, store, pooled)
    }
}
