//! Dense `f32` tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
pub mod container;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use container::TensorFile;
pub use optim::Adam;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
