//! Dense tensors, reverse-mode differentiation, Adam/AdamW and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{AdamConfig, DecayMode, OptimState, StepDecay};
pub use params::{forward_backward, init, Binder, GradMap, Param, ParamSet};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
