//! Dense tensors, layer kernels with hand-written reverse passes, RMSProp
//! and checkpoint I/O.

pub mod checkpoint;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use ops::{Activation, Padding};
pub use optim::{Parameter, RmsProp};
pub use scalar::Scalar;
pub use tensor::Tensor;
