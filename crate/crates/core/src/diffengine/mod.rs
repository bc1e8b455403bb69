//! Minimal differentiable array engine.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_registered_ops, grad_check, registered_ops, GradCheckReport, OpCheck};
pub use optim::{Optimizer, OptimizerKind};
pub use ops::{count_params, inception_receptive_field, receptive_field, BatchNorm1d};
pub use params::{BoundParams, FrozenFilter, ParamStore};
pub use tape::{ConvMode, Grads, Tape, Var};
pub use tensor::Tensor;
