//! Small reverse-mode differentiation kit: tensors, a recording tape with
//! the layer ops the retouching network needs, Adam, and gradient checking.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{cosine_factor, Adam, OptimError, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, Real, Tensor};
