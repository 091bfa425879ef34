//! Minimal reverse-mode differentiation, optimizers and learning-rate
//! schedules.

pub mod checkpoint;
mod graph;
mod optim;
mod param;
mod schedule;

pub use graph::{Gradients, Graph, StatUpdate, Var, BN_EPS, BN_MOMENTUM};
pub use optim::{clip_grad_norm, sgd_step};
pub(crate) use param::hex_digest;
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use schedule::{lr_at, LrSchedule, ScheduleKind};
