pub mod autodiff;
pub mod binary;
pub mod bits;
pub mod cell;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod flops;
pub mod genotype;
pub mod harness;
pub mod lowering;
pub mod network;
pub mod nn;
pub mod rng;
pub mod search;
pub mod space;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
