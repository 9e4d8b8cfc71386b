//! Dense tensors with reverse-mode gradients and a finite-difference harness.

pub mod gradcheck;
pub mod init;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_tensor, grad_check_with, Coverage};
pub use optim::{clip_grad_norm, Adam};
pub use tape::{logsumexp, sigmoid, Gradients, ParamId, ParamSet, Tape, Var};
pub use tensor::{Tensor, LAYER_NORM_EPS};
