use std::f64::consts::PI;

use crate::error::{contract, Result};

/// Fraction of steps spent warming up in the one-cycle schedule.
pub const ONE_CYCLE_WARMUP: f64 = 0.3;
/// One-cycle starting lr is `base / ONE_CYCLE_START_DIV`.
pub const ONE_CYCLE_START_DIV: f64 = 25.0;
/// One-cycle final lr is `base / ONE_CYCLE_FINAL_DIV`.
pub const ONE_CYCLE_FINAL_DIV: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    OneCycle,
    Constant,
}

impl std::str::FromStr for ScheduleKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "one_cycle" => Ok(ScheduleKind::OneCycle),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(crate::Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, base_lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            kind,
            base_lr,
            total_steps,
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(contract(format!(
                "step {} beyond schedule length {}",
                step, self.total_steps
            )));
        }
        let total = self.total_steps.max(1) as f64;
        let t = step as f64 / total;
        let base = self.base_lr;
        Ok(match self.kind {
            ScheduleKind::Constant => base,
            ScheduleKind::Cosine => (0.5 * base * (1.0 + (PI * t).cos())).max(0.0),
            ScheduleKind::OneCycle => {
                let start = base / ONE_CYCLE_START_DIV;
                let end = base / ONE_CYCLE_FINAL_DIV;
                if t <= ONE_CYCLE_WARMUP {
                    start + (base - start) * t / ONE_CYCLE_WARMUP
                } else {
                    base + (end - base) * (t - ONE_CYCLE_WARMUP) / (1.0 - ONE_CYCLE_WARMUP)
                }
            }
        })
    }
}

pub fn lr_at(schedule: &LrSchedule, step: usize) -> Result<f64> {
    schedule.lr_at(step)
}
