//! Dense `f64` tensors, the primitive operations a convolutional recurrent
//! cell needs, and tape-based reverse-mode differentiation over them.
//!
//! ```
//! use cms_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(0.0));
//! let y = x.sigmoid();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 0.25);
//! ```

pub mod check;
mod error;
pub mod kernels;
mod tape;
mod tensor;

pub use check::FiniteDiff;
pub use error::{Result, TensorError};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
