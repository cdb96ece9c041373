//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

pub mod init;
mod ops;
mod optim;
mod tensor;

pub use ops::{elementwise, mse, ElementwiseOp, Mask, MASK_FILL};
pub use optim::{adam_step, Adam, AdamConfig};
pub use tensor::{no_grad, ComputationRecord, RecordEntry, Scalar, Tensor};
