//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every learnable computation in the crate is recorded on a [`Tape`] and
//! differentiated with [`Tape::backward`]. Storage is `f32`; the same code
//! runs in `f64` for gradient checking.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{adam_step, apply_adam, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Csr, Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

/// Default optimizer learning rate.
pub const DEFAULT_LR: f64 = 1e-3;
