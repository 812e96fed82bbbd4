pub mod autodiff;
pub mod data;
pub mod error;
pub mod interpret;
pub mod models;
pub mod receptive_field;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use models::{ArchConfig, Model, Variant};
pub use tensor::{Scalar, Tensor};
