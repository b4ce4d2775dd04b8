//! Base optimizers, learning-rate schedules, stage switching and the SAM
//! outer loop (ascent, perturbed re-evaluation, descent) with m-sharpness.

mod base;
mod sam;
mod schedule;

pub use base::{base_step, BaseOptimizer, OptimizerState};
pub use sam::{
    sam_step, ModelObjective, Objective, OptimConfig, OptimizerKind, Pass, SamOptimizer,
    StageSwitch, StepMetrics, stage_controller,
};
pub use schedule::{lr_at, Schedule};
