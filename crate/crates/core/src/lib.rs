//! Learning-rate schedule experiments: knee schedules, optimizers, a small
//! MLP, synthetic loss landscapes and sharpness measures.

// guards are written `!(x > 0.0)` so that NaN fails them
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// optimizer kernels index several parallel buffers in one loop
#![allow(clippy::needless_range_loop)]

pub mod lab;
pub mod net;
pub mod objective;
pub mod optim;
pub mod params;
pub mod scape;
pub mod sched;
pub mod seed;
pub mod sharp;

pub use objective::{FnObjective, Objective, Quadratic};
pub use optim::{Algorithm, Optimizer, OptimizerHyper, OptimizerState};
pub use params::{LayerShape, ParamVector};
pub use sched::{build_schedule, Schedule, ScheduleKind, ScheduleSpec};
