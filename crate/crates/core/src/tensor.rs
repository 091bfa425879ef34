//! Dense NCHW float tensors.

use std::fmt;

use rand::Rng;

use crate::error::{contract, Result};

/// Four-dimensional shape `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Contiguous row-major NCHW tensor of `f32`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(contract(format!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; numel(&shape)],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..numel(&shape)).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    /// Approximately standard-normal samples (Box-Muller).
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f32, rng: &mut R) -> Self {
        let data = (0..numel(&shape))
            .map(|_| {
                let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
                let u2: f32 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(contract(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: f32) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|&v| v.abs() as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(crate::error::geometry(format!(
                "expected shape {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    /// Copy of batch items `[start, start + count)`.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Tensor> {
        if start + count > self.shape[0] {
            return Err(contract(format!(
                "batch slice {}..{} out of range for {} items",
                start,
                start + count,
                self.shape[0]
            )));
        }
        let item = self.item_len();
        Ok(Tensor {
            shape: [count, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * item..(start + count) * item].to_vec(),
        })
    }

    /// Elementwise sign with the `sign(0) = +1` convention.
    pub fn sign(&self) -> Tensor {
        self.map(sign)
    }
}

/// `+1` for `x >= 0`, `-1` otherwise.
#[inline]
pub fn sign(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}
