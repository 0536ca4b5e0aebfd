pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod occlusion;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{FfiNet, ModelParams};
