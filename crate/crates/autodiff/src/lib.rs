//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Values live in row-major [`Tensor`]s of `f32` or `f64`. A [`Tape`]
//! records each primitive as it is evaluated; [`Tape::backward`] replays the
//! record in reverse to produce [`Gradients`]. [`ParamStore`] keeps named
//! parameters across tapes and [`Adam`] updates them.
//!
//! ```
//! use layoutlab_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

mod error;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
