pub mod attack;
pub mod autodiff;
pub mod compression;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod params;
pub mod protopnet;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{ParamId, ParameterStore};
pub use tensor::Tensor;
