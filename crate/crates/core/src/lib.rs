pub mod adaptive;
pub mod attacks;
pub mod autograd;
pub mod bounds;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod error;
pub mod imageio;
pub mod ladder;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pyramid;
pub mod spectral;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
