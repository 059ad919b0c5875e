//! Dense tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! The [`Tape`] records every operation together with its forward value;
//! [`Tape::backward`] replays the chain rule in reverse. Each differentiable
//! operation can be verified against central finite differences with
//! [`check_gradients`].

mod catalog;
mod checkpoint;
mod error;
mod gradcheck;
mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use catalog::{op_catalog, OpCase};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_HEADER, DATA_FILE, MANIFEST_FILE};
pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheck};
pub use scalar::Scalar;
pub use tape::{conv_output_size, shape_numel, Gradients, Tape, Unary, Upsample, Var};
pub use tensor::Tensor;
