//! From-scratch neural-network primitives: tensors, layers with exact
//! backward passes, the sequential stack, and a finite-difference gradient
//! checker.

pub mod gradcheck;
pub mod layers;
pub mod stack;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use layers::{softmax_xent, SoftmaxLoss};
pub use stack::{Cache, GradSet, Layer, LayerStack, Pass};
pub use tensor::{Scalar, Tensor};
