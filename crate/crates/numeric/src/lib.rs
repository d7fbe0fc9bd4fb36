//! Small dense-tensor toolkit: reverse-mode autodiff over a closed set of
//! sequence-model primitives, Adam, finite-difference gradient checks,
//! seeded random streams and JSON checkpoints. Everything is `f64`.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::{fingerprint, Checkpoint};
pub use error::{NumericError, Result};
pub use gradcheck::{finite_diff_check, grad, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
