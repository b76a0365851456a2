//! A small trainable residual CNN whose downsampling positions are set by a
//! pooling configuration, with hand-written backward passes and finite
//! difference gradient checks.

pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod tensor;

pub use error::{CnnError, Result};
pub use network::{
    build_network, evaluate, forward, gradient_check, lr_at, train_step, Mode, NetworkPlan, Sgd,
    WeightSet,
};
pub use tensor::{Scalar, Tensor4};
