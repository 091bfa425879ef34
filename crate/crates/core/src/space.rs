//! Layer types of the binary search space and flag-driven op sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerType {
    BinConv3x3,
    BinConv5x5,
    BinDilConv3x3,
    BinDilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    Zeroise,
    /// Only present when separable convolutions are deliberately searched.
    SepConv3x3,
    SepConv5x5,
}

/// The seven members of the default binary search space, in index order.
pub const SEARCH_SPACE: [LayerType; 7] = [
    LayerType::BinConv3x3,
    LayerType::BinConv5x5,
    LayerType::BinDilConv3x3,
    LayerType::BinDilConv5x5,
    LayerType::MaxPool3x3,
    LayerType::AvgPool3x3,
    LayerType::Zeroise,
];

impl LayerType {
    pub const ALL: [LayerType; 9] = [
        LayerType::BinConv3x3,
        LayerType::BinConv5x5,
        LayerType::BinDilConv3x3,
        LayerType::BinDilConv5x5,
        LayerType::MaxPool3x3,
        LayerType::AvgPool3x3,
        LayerType::Zeroise,
        LayerType::SepConv3x3,
        LayerType::SepConv5x5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerType::BinConv3x3 => "bin_conv_3x3",
            LayerType::BinConv5x5 => "bin_conv_5x5",
            LayerType::BinDilConv3x3 => "bin_dil_conv_3x3",
            LayerType::BinDilConv5x5 => "bin_dil_conv_5x5",
            LayerType::MaxPool3x3 => "max_pool_3x3",
            LayerType::AvgPool3x3 => "avg_pool_3x3",
            LayerType::Zeroise => "zeroise",
            LayerType::SepConv3x3 => "sep_conv_3x3",
            LayerType::SepConv5x5 => "sep_conv_5x5",
        }
    }

    /// Stable numeric id used in logs.
    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).expect("listed")
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    /// Whether the layer owns learnable parameters.
    pub fn is_parameterized(self) -> bool {
        !matches!(
            self,
            LayerType::MaxPool3x3 | LayerType::AvgPool3x3 | LayerType::Zeroise
        )
    }

    pub fn is_sep_conv(self) -> bool {
        matches!(self, LayerType::SepConv3x3 | LayerType::SepConv5x5)
    }

    pub fn is_dilated(self) -> bool {
        matches!(self, LayerType::BinDilConv3x3 | LayerType::BinDilConv5x5)
    }

    /// `(kernel, dilation)` for convolution layer types.
    pub fn conv_shape(self) -> Option<(usize, usize)> {
        match self {
            LayerType::BinConv3x3 | LayerType::SepConv3x3 => Some((3, 1)),
            LayerType::BinConv5x5 | LayerType::SepConv5x5 => Some((5, 1)),
            LayerType::BinDilConv3x3 => Some((3, 2)),
            LayerType::BinDilConv5x5 => Some((5, 2)),
            _ => None,
        }
    }
}

impl fmt::Display for LayerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerType::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer type `{s}`")))
    }
}

/// Ablation switches for the search space and cell template.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceFlags {
    pub no_skip: bool,
    pub no_zeroise: bool,
    pub no_dilated: bool,
    pub keep_sepconv: bool,
}

/// Ordered candidate ops for every mixed edge.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct OpSet {
    ops: Vec<LayerType>,
}

impl OpSet {
    pub fn new(ops: Vec<LayerType>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Config("empty op set".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !ops.iter().all(|o| seen.insert(*o)) {
            return Err(Error::Config("duplicate op in op set".into()));
        }
        Ok(OpSet { ops })
    }

    pub fn from_flags(flags: &SpaceFlags) -> Result<Self> {
        let mut ops: Vec<LayerType> = SEARCH_SPACE
            .iter()
            .copied()
            .filter(|t| !(flags.no_zeroise && *t == LayerType::Zeroise))
            .filter(|t| !(flags.no_dilated && t.is_dilated()))
            .collect();
        if flags.keep_sepconv {
            ops.push(LayerType::SepConv3x3);
            ops.push(LayerType::SepConv5x5);
        }
        OpSet::new(ops)
    }

    pub fn ops(&self) -> &[LayerType] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn position(&self, t: LayerType) -> Option<usize> {
        self.ops.iter().position(|&o| o == t)
    }

    pub fn contains(&self, t: LayerType) -> bool {
        self.position(t).is_some()
    }

    pub fn zeroise_index(&self) -> Option<usize> {
        self.position(LayerType::Zeroise)
    }
}
