//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse and returns gradients for the leaves created with
//! `requires_grad`. There is no general broadcasting: channel-wise and
//! row-wise broadcasts are explicit ops ([`Tape::affine`],
//! [`Tape::channel_add`], [`Tape::expand_rows`]).
//!
//! ```
//! use hsdiff::gradcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
//! ```

mod check;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::grad_check;
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Bound, ParamSet};
pub use tape::{Gradients, OpKind, Tape, Var};
pub(crate) use tape::sigmoid;
pub use tensor::Tensor;
