//! Dense CPU tensors with a recorded computation tape.
//!
//! Values are [`Tensor`]s. Differentiable computations are recorded on a
//! [`Graph`], which hands out [`Var`] handles and runs the reverse sweep.
//! [`gradcheck`] holds the central-difference oracle used to validate it.
//!
//! ```
//! use transdae_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64([2], &[1.0, -2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0]);
//! ```

mod conv;
mod error;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub mod gradcheck;

pub use conv::Conv2dSpec;
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
