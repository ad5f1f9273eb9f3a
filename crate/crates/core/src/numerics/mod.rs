//! Dense-tensor substrate: a reverse-mode autodiff tape, AdamW with LR
//! warmup, EMA weight tracking, and a finite-difference gradient checker.
//! Training runs in 64-bit floats throughout so the checker is meaningful.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{warmup_lr, AdamW, Ema};
pub use params::{gaussian, ParamEntry, Params};
pub use tape::{Graph, NodeId, ParamId, Tensor};
