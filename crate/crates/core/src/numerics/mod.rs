//! Dense array math: tensors, linear algebra, activations, losses, MLPs with
//! hand-written backward passes, and a finite-difference gradient checker.

pub mod gradcheck;
pub mod hpt;
pub mod mlp;
pub mod ops;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, finite_diff_grad_at, relative_error, GradCheckReport};
pub use mlp::{Linear, MlpCache, MlpParams};
pub use ops::{cross_entropy, cross_entropy_with_grad, matmul, softmax};
pub use params::ParamTree;
pub use tensor::{Scalar, Tensor};
