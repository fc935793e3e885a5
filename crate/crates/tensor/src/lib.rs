//! Dense row-major tensors with a define-by-run tape for reverse-mode
//! differentiation, plus the Adam optimizer.
//!
//! A [`Tape`] records every operation whose inputs require gradients. Calling
//! [`Tape::backward`] on a scalar result consumes the tape and returns a
//! [`Gradients`] table indexed by [`Var`]. Parameters can be registered by
//! reference with [`Tape::param`], so building a graph never copies weights.
//!
//! ```
//! use slyt_tensor::{Tape, Tensor};
//!
//! let x = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
//! let mut tape = Tape::new();
//! let xv = tape.param(&x);
//! let sq = tape.mul(xv, xv).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(xv).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod adam;
mod error;
mod float;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use float::Float;
pub use gradcheck::{grad_check, GradCheckReport, LeafReport};
pub use tape::{dropout_mask, AttentionShape, Gradients, Tape, Var};
pub use tensor::Tensor;
