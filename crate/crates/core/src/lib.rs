pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod flt;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mve;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod vd;
pub mod vim;

pub use autodiff::{Gradients, ParamId, ParamStore, Scope, Tape, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
