pub mod cli;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod preproc;
pub mod replay;
pub mod sessions;
pub mod trainer;

pub use error::{Error, Result};

pub type Network64 = model::Network<f64>;
pub type Network32 = model::Network<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
