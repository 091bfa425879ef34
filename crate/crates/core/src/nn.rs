//! Parameterized building blocks shared by the supernet, derived networks and
//! the study probe nets.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamKind, ParamStore, Var};
use crate::error::{contract, Result};
use crate::lowering::ConvGeometry;
use crate::space::LayerType;
use crate::tensor::{Shape, Tensor};

/// Numeric precision of the convolutions inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    /// batchnorm -> sign -> XNOR conv scaled by beta and K.
    Binary,
    /// The float twin: batchnorm -> float conv.
    Float,
}

/// Registers an affine batchnorm over `c` channels: `[gamma, beta, mean, var]`.
pub fn add_bn(store: &mut ParamStore, prefix: &str, c: usize) -> [ParamId; 4] {
    let s = [1, c, 1, 1];
    [
        store.add(
            format!("{prefix}.bn.gamma"),
            ParamKind::BnScale,
            Tensor::full(s, 1.0),
        ),
        store.add(
            format!("{prefix}.bn.beta"),
            ParamKind::BnShift,
            Tensor::zeros(s),
        ),
        store.add(
            format!("{prefix}.bn.mean"),
            ParamKind::RunningMean,
            Tensor::zeros(s),
        ),
        store.add(
            format!("{prefix}.bn.var"),
            ParamKind::RunningVar,
            Tensor::full(s, 1.0),
        ),
    ]
}

/// Uniform in `+-1/sqrt(fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let b = 1.0 / (fan_in as f32).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

/// batchnorm -> (sign ->) conv -> optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub bn: [ParamId; 4],
    pub weight: ParamId,
    pub geom: ConvGeometry,
    pub groups: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub precision: Precision,
    pub relu: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        groups: usize,
        precision: Precision,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        let bn = add_bn(store, name, c_in);
        let kind = match precision {
            Precision::Binary => ParamKind::BinConv,
            Precision::Float => ParamKind::Conv,
        };
        let w = init_weight([c_out, c_in / groups, geom.kh, geom.kw], rng);
        let weight = store.add(format!("{name}.weight"), kind, w);
        ConvBlock {
            bn,
            weight,
            geom,
            groups,
            c_in,
            c_out,
            precision,
            relu,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = g.batch_norm_param(store, x, self.bn)?;
        let w = g.param(store, self.weight);
        let y = match self.precision {
            Precision::Binary => g.bin_conv2d(h, w, self.geom, self.groups)?,
            Precision::Float => g.conv2d(h, w, self.geom, self.groups)?,
        };
        if self.relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        let (oh, ow) = self.geom.output_hw(x[2], x[3])?;
        Ok([x[0], self.c_out, oh, ow])
    }
}

/// Depthwise block followed by a pointwise block; the depthwise output is
/// renormalized and re-binarized before the 1x1 conv.
#[derive(Clone, Debug)]
pub struct SepBlock {
    pub depthwise: ConvBlock,
    pub pointwise: ConvBlock,
}

impl SepBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
        precision: Precision,
        rng: &mut R,
    ) -> Self {
        let depthwise = ConvBlock::new(
            store,
            &format!("{name}.dw"),
            c_in,
            c_in,
            geom,
            c_in,
            precision,
            false,
            rng,
        );
        let pointwise = ConvBlock::new(
            store,
            &format!("{name}.pw"),
            c_in,
            c_out,
            ConvGeometry::new(1, 1, 1, 0),
            1,
            precision,
            true,
            rng,
        );
        SepBlock {
            depthwise,
            pointwise,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.depthwise.forward(g, store, x)?;
        self.pointwise.forward(g, store, h)
    }
}

/// One candidate operation on an edge.
#[derive(Clone, Debug)]
pub enum OpModule {
    Conv(ConvBlock),
    Sep(SepBlock),
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Zeroise { stride: usize },
}

/// Window shared by pooling and zeroise: kernel 3, padding 1.
pub fn window(stride: usize) -> ConvGeometry {
    ConvGeometry::new(3, stride, 1, 1)
}

impl OpModule {
    /// Channel-preserving op of type `t` on `c` channels.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        t: LayerType,
        c: usize,
        stride: usize,
        precision: Precision,
        rng: &mut R,
    ) -> Self {
        match t {
            LayerType::MaxPool3x3 => OpModule::MaxPool { stride },
            LayerType::AvgPool3x3 => OpModule::AvgPool { stride },
            LayerType::Zeroise => OpModule::Zeroise { stride },
            _ => {
                let (k, d) = t.conv_shape().expect("conv layer type");
                let geom = ConvGeometry::same(k, stride, d);
                if t.is_sep_conv() {
                    OpModule::Sep(SepBlock::new(store, name, c, c, geom, precision, rng))
                } else {
                    OpModule::Conv(ConvBlock::new(
                        store, name, c, c, geom, 1, precision, true, rng,
                    ))
                }
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            OpModule::Conv(b) => b.forward(g, store, x),
            OpModule::Sep(b) => b.forward(g, store, x),
            OpModule::MaxPool { stride } => g.max_pool(x, window(*stride)),
            OpModule::AvgPool { stride } => g.avg_pool(x, window(*stride)),
            OpModule::Zeroise { stride } => {
                let shape = zeroise_shape(g.shape(x), *stride)?;
                Ok(g.constant(Tensor::zeros(shape)))
            }
        }
    }
}

/// Output shape of a zeroise op: that of a 3x3 window with padding 1.
pub fn zeroise_shape(x: Shape, stride: usize) -> Result<Shape> {
    if stride == 0 {
        return Err(contract("zeroise stride must be positive"));
    }
    let (oh, ow) = window(stride).output_hw(x[2], x[3])?;
    Ok([x[0], x[1], oh, ow])
}

/// Zero tensor in the strided output shape of `x`.
pub fn zeroise_forward(x: &Tensor, stride: usize) -> Result<Tensor> {
    Ok(Tensor::zeros(zeroise_shape(x.shape(), stride)?))
}

/// Float fully connected layer on `(N, F, 1, 1)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Linear,
            init_weight([c_out, c_in, 1, 1], rng),
        );
        let b = 1.0 / (c_in.max(1) as f32).sqrt();
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::uniform([1, c_out, 1, 1], -b, b, rng),
        );
        Linear {
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let [n, c, h, w] = g.shape(x);
        let x = if h * w != 1 {
            g.reshape(x, [n, c * h * w, 1, 1])?
        } else {
            x
        };
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Float 3x3 conv followed by batchnorm.
#[derive(Clone, Debug)]
pub struct Stem {
    pub weight: ParamId,
    pub bn: [ParamId; 4],
    pub c_in: usize,
    pub c_out: usize,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            "stem.weight",
            ParamKind::Conv,
            init_weight([c_out, c_in, 3, 3], rng),
        );
        let bn = add_bn(store, "stem", c_out);
        Stem {
            weight,
            bn,
            c_in,
            c_out,
        }
    }

    pub fn geom() -> ConvGeometry {
        ConvGeometry::same(3, 1, 1)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv2d(x, w, Self::geom(), 1)?;
        g.batch_norm_param(store, y, self.bn)
    }
}
