//! Complexity accounting for binary networks and their float twins.
//!
//! Counts are per image. A multiply-accumulate is one op. Binary MACs are
//! weighted 1/64 in `effective_flops`. Elementwise float work is charged as
//! follows: batchnorm 1 op per input element, the activation-scale map and
//! output scaling of a binary conv `C_in*H*W + taps*Ho*Wo + 2*C_out*Ho*Wo`,
//! pooling one op per window tap, every tensor addition 1 op per element.
//! Sign, ReLU, concatenation, zero padding and Zeroise are free.

use std::fmt::Write as _;

use crate::cell::{Body, Cell};
use crate::error::Result;
use crate::network::{build_network, NetworkSpec};
use crate::nn::{window, ConvBlock, OpModule, Precision};
use crate::tensor::Shape;

pub const BINARY_OP_WEIGHT: f64 = 1.0 / 64.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub float_ops: u64,
    pub binary_ops: u64,
    pub params_float: u64,
    pub params_binary_bits: u64,
    pub betas: u64,
}

impl LayerCost {
    fn named(name: impl Into<String>) -> Self {
        LayerCost {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn effective_flops(&self) -> f64 {
        self.float_ops as f64 + self.binary_ops as f64 * BINARY_OP_WEIGHT
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopsReport {
    pub float_ops: u64,
    pub binary_ops: u64,
    pub effective_flops: f64,
    pub params_float: u64,
    pub params_binary_bits: u64,
    pub betas: u64,
    pub layers: Vec<LayerCost>,
}

impl FlopsReport {
    fn from_layers(layers: Vec<LayerCost>) -> Self {
        let mut r = FlopsReport {
            layers,
            ..Default::default()
        };
        for l in &r.layers {
            r.float_ops += l.float_ops;
            r.binary_ops += l.binary_ops;
            r.params_float += l.params_float;
            r.params_binary_bits += l.params_binary_bits;
            r.betas += l.betas;
        }
        r.effective_flops = r.float_ops as f64 + r.binary_ops as f64 * BINARY_OP_WEIGHT;
        r
    }

    /// Bits needed to store the model: 32 per float value and beta, 1 per binary weight.
    pub fn storage_bits(&self) -> u64 {
        32 * self.params_float + self.params_binary_bits + 32 * self.betas
    }

    pub fn total_params(&self) -> u64 {
        self.params_float + self.params_binary_bits
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>16}", "float ops", self.float_ops);
        let _ = writeln!(s, "{:<28} {:>16}", "binary ops", self.binary_ops);
        let _ = writeln!(
            s,
            "{:<28} {:>16.1}",
            "effective flops", self.effective_flops
        );
        let _ = writeln!(s, "{:<28} {:>16}", "float params", self.params_float);
        let _ = writeln!(
            s,
            "{:<28} {:>16}",
            "binary params (bits)", self.params_binary_bits
        );
        let _ = writeln!(s, "{:<28} {:>16}", "scale factors", self.betas);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,float_ops,binary_ops,effective_flops,params_float,params_binary_bits,betas\n",
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{:.3},{},{},{}",
                l.name,
                l.float_ops,
                l.binary_ops,
                l.effective_flops(),
                l.params_float,
                l.params_binary_bits,
                l.betas
            );
        }
        s
    }
}

fn numel3(s: Shape) -> u64 {
    (s[1] * s[2] * s[3]) as u64
}

/// Cost of one conv block on a single image of shape `x`.
pub fn conv_block_cost(b: &ConvBlock, x: Shape, name: &str) -> Result<(LayerCost, Shape)> {
    let out = b.output_shape(x)?;
    let mut c = LayerCost::named(name);
    let in_elems = numel3(x);
    c.float_ops += in_elems;
    c.params_float += 2 * b.c_in as u64;
    let taps = b.geom.taps() as u64;
    let weights = (b.c_out * (b.c_in / b.groups)) as u64 * taps;
    let spatial = (out[2] * out[3]) as u64;
    let macs = spatial * weights;
    match b.precision {
        Precision::Binary => {
            c.binary_ops += macs;
            c.params_binary_bits += weights;
            c.betas += b.c_out as u64;
            let scale_maps = b.groups as u64;
            c.float_ops += in_elems + scale_maps * taps * spatial + 2 * b.c_out as u64 * spatial;
        }
        Precision::Float => {
            c.float_ops += macs;
            c.params_float += weights;
        }
    }
    Ok((c, out))
}

fn op_cost(op: &OpModule, x: Shape, name: &str) -> Result<(Vec<LayerCost>, Shape)> {
    Ok(match op {
        OpModule::Conv(b) => {
            let (c, s) = conv_block_cost(b, x, name)?;
            (vec![c], s)
        }
        OpModule::Sep(b) => {
            let (c1, s1) = conv_block_cost(&b.depthwise, x, &format!("{name}.dw"))?;
            let (c2, s2) = conv_block_cost(&b.pointwise, s1, &format!("{name}.pw"))?;
            (vec![c1, c2], s2)
        }
        OpModule::MaxPool { stride } | OpModule::AvgPool { stride } => {
            let g = window(*stride);
            let (oh, ow) = g.output_hw(x[2], x[3])?;
            let mut c = LayerCost::named(name);
            c.float_ops = (x[1] * oh * ow * g.taps()) as u64;
            (vec![c], [x[0], x[1], oh, ow])
        }
        OpModule::Zeroise { stride } => {
            let (oh, ow) = window(*stride).output_hw(x[2], x[3])?;
            (vec![LayerCost::named(name)], [x[0], x[1], oh, ow])
        }
    })
}

fn cell_cost(cell: &Cell, s0: Shape, s1: Shape, out: &mut Vec<LayerCost>) -> Result<Shape> {
    let name = format!("cell{}", cell.index);
    let (c0, p0) = conv_block_cost(&cell.pre0, s0, &format!("{name}.pre0"))?;
    let (c1, p1) = conv_block_cost(&cell.pre1, s1, &format!("{name}.pre1"))?;
    out.push(c0);
    out.push(c1);
    let mut states = vec![p0, p1];
    for node in 2..2 + cell.nodes {
        let mut shape = None;
        let mut terms = 0u64;
        for e in cell.edges.iter().filter(|e| e.node == node) {
            for (op, t) in e.ops.iter().zip(&e.types) {
                let (costs, s) = op_cost(
                    op,
                    states[e.from],
                    &format!("{name}.e{}_{}.{}", e.from, e.node, t),
                )?;
                out.extend(costs);
                shape = Some(s);
                terms += 1;
            }
        }
        let s = shape.expect("every node has an input");
        if terms > 1 {
            let mut add = LayerCost::named(format!("{name}.node{node}.sum"));
            add.float_ops = (terms - 1) * numel3(s);
            out.push(add);
        }
        states.push(s);
    }
    let o = states[2];
    let cat = [o[0], o[1] * cell.nodes, o[2], o[3]];
    if cell.skip {
        let mut skip = LayerCost::named(format!("{name}.skip"));
        if s1[2] != cat[2] {
            skip.float_ops += (s1[1] * cat[2] * cat[3] * 4) as u64;
        }
        skip.float_ops += numel3(cat);
        out.push(skip);
    }
    Ok(cat)
}

/// Walks a built body for a `[C, H, W]` input.
pub fn body_cost(body: &Body, input: [usize; 3]) -> Result<FlopsReport> {
    let mut layers = Vec::new();
    let stem_out = [1, body.stem.c_out, input[1], input[2]];
    let mut stem = LayerCost::named("stem");
    let w = (body.stem.c_out * body.stem.c_in * 9) as u64;
    stem.float_ops = w * (input[1] * input[2]) as u64 + numel3(stem_out);
    stem.params_float = w + 2 * body.stem.c_out as u64;
    layers.push(stem);
    let (mut s0, mut s1) = (stem_out, stem_out);
    for cell in &body.cells {
        let o = cell_cost(cell, s0, s1, &mut layers)?;
        s0 = s1;
        s1 = o;
    }
    let mut gap = LayerCost::named("global_pool");
    gap.float_ops = numel3(s1);
    layers.push(gap);
    let mut fc = LayerCost::named("classifier");
    let (i, o) = (body.head.c_in as u64, body.head.c_out as u64);
    fc.float_ops = i * o + o;
    fc.params_float = i * o + o;
    layers.push(fc);
    Ok(FlopsReport::from_layers(layers))
}

pub fn count_flops(spec: &NetworkSpec) -> Result<FlopsReport> {
    let net = build_network(spec, 0)?;
    body_cost(&net.body, spec.input_shape)
}

/// `32 * params(twin) / storage_bits(spec)`, where the twin is the float
/// version of `reference`.
pub fn memory_savings_against(spec: &NetworkSpec, reference: &NetworkSpec) -> Result<f64> {
    let twin = count_flops(&reference.float_twin())?;
    let bin = count_flops(spec)?;
    Ok(32.0 * twin.total_params() as f64 / bin.storage_bits() as f64)
}

/// Savings relative to the float twin of the same network.
pub fn memory_savings(spec: &NetworkSpec) -> Result<f64> {
    memory_savings_against(spec, spec)
}

/// `flops(float twin of reference) / effective_flops(spec)`.
pub fn inference_speedup_against(spec: &NetworkSpec, reference: &NetworkSpec) -> Result<f64> {
    let twin = count_flops(&reference.float_twin())?;
    let bin = count_flops(spec)?;
    Ok(twin.effective_flops / bin.effective_flops)
}

pub fn inference_speedup(spec: &NetworkSpec) -> Result<f64> {
    inference_speedup_against(spec, spec)
}
