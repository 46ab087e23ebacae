//! Model-reuse engine.
//!
//! Three stages over a small deterministic tensor core:
//!
//! * [`architect`] adapts a pre-trained network's structure (LoRA, adapters,
//!   prefix tokens, BitFit, scale-and-shift, linear probing, partial-k),
//! * [`tuner`] trains it under task, distillation and weight-space terms,
//! * [`merger`] fuses several models in weight, feature or prediction space.

pub mod architect;
pub mod autodiff;
pub mod error;
pub mod linalg;
pub mod merger;
pub mod tensor;
pub mod tuner;
pub mod zoo;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{EwKind, Operand, Tensor};
