pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod segmentation;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{DatError, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
