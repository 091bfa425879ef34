use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{contract, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Float convolution weights (stem, float twins).
    Conv,
    /// Float master weights of a binarized convolution.
    BinConv,
    Linear,
    Bias,
    BnScale,
    BnShift,
    /// Non-trainable running statistics.
    RunningMean,
    RunningVar,
    /// Architecture logits.
    Arch,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, ParamKind::Conv | ParamKind::BinConv)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ParamKind::Conv => 0,
            ParamKind::BinConv => 1,
            ParamKind::Linear => 2,
            ParamKind::Bias => 3,
            ParamKind::BnScale => 4,
            ParamKind::BnShift => 5,
            ParamKind::RunningMean => 6,
            ParamKind::RunningVar => 7,
            ParamKind::Arch => 8,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::Conv,
            1 => ParamKind::BinConv,
            2 => ParamKind::Linear,
            3 => ParamKind::Bias,
            4 => ParamKind::BnScale,
            5 => ParamKind::BnShift,
            6 => ParamKind::RunningMean,
            7 => ParamKind::RunningVar,
            8 => ParamKind::Arch,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
}

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

/// Named collection of parameters owned by one model component.
///
/// Each store carries a unique tag so a graph can tell which store a leaf
/// came from; gradients are only ever accumulated into the owning store.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    requires_grad: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
            requires_grad: true,
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let shape = value.shape();
        self.params.push(Parameter {
            name: name.clone(),
            kind,
            value,
            grad: Tensor::zeros(shape),
            momentum: Tensor::zeros(shape),
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Whether graph leaves created from this store take part in backward.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Sum of `|grad|` over all convolution weights.
    pub fn conv_grad_magnitude(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind.is_conv())
            .map(|p| p.grad.abs_sum())
            .sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(contract(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Replaces values by name from another store with identical layout.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| contract(format!("parameter {} missing from source", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(contract(format!(
                    "parameter {}: shape {:?} vs {:?}",
                    p.name,
                    p.value.shape(),
                    src.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(String, Shape)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape()))
            .collect()
    }

    /// SHA-256 over names, shapes and values (gradients excluded).
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}
