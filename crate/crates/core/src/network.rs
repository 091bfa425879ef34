//! Trainable networks stacked from a genotype.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::cell::{Body, BodyShape, EdgeSpec};
use crate::error::{Error, Result};
use crate::genotype::{Genotype, NodeRecord};
use crate::nn::Precision;
use crate::rng::{substream, STREAM_INIT};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub genotype: Genotype,
    pub cells: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    pub inter_cell_skip: bool,
    pub precision: Precision,
}

impl NetworkSpec {
    /// Binary network with skips on, 10 classes, 3x32x32 inputs.
    pub fn new(genotype: Genotype, cells: usize, channels: usize) -> Self {
        NetworkSpec {
            genotype,
            cells,
            channels,
            num_classes: 10,
            input_shape: [3, 32, 32],
            inter_cell_skip: true,
            precision: Precision::Binary,
        }
    }

    /// Same structure with every binary convolution replaced by a float one.
    pub fn float_twin(&self) -> Self {
        NetworkSpec {
            precision: Precision::Float,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.genotype.validate()?;
        if self.cells < 3 {
            return Err(Error::Config(format!(
                "need at least 3 cells, got {}",
                self.cells
            )));
        }
        if self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "channels and classes must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn edges_of(nodes: &[NodeRecord]) -> Vec<EdgeSpec> {
    nodes
        .iter()
        .flat_map(|n| {
            n.edges.iter().map(move |e| EdgeSpec {
                node: n.node,
                from: e.from,
                row: 0,
                ops: vec![e.op],
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub weights: ParamStore,
    pub body: Body,
}

pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = substream(seed, STREAM_INIT);
    let mut weights = ParamStore::new();
    let normal = edges_of(&spec.genotype.normal);
    let reduce = edges_of(&spec.genotype.reduce);
    let edges = move |reduction: bool| {
        if reduction {
            reduce.clone()
        } else {
            normal.clone()
        }
    };
    let body = Body::new(
        &mut weights,
        BodyShape {
            cells: spec.cells,
            channels: spec.channels,
            in_channels: spec.input_shape[0],
            num_classes: spec.num_classes,
            nodes: spec.genotype.nodes(),
            precision: spec.precision,
            skip: spec.inter_cell_skip,
            mixed: false,
        },
        &edges,
        &mut rng,
    )?;
    Ok(Network {
        spec: spec.clone(),
        weights,
        body,
    })
}

impl Network {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [c, h, w] = self.spec.input_shape;
        let s = g.shape(x);
        if s[1..] != [c, h, w] {
            return Err(Error::InvalidGeometry(format!(
                "network expects {}x{}x{} inputs, got {:?}",
                c, h, w, s
            )));
        }
        self.body.forward(g, &self.weights, x, None)
    }
}
