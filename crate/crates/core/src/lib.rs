//! Selective state-space network for CT metal artifact reduction, together
//! with a small autodiff engine, a CT simulator, training and evaluation.

pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod ct;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod msmamba;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod selftest;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
