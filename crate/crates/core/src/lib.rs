pub mod attention;
pub mod autodiff;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod params;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Padding, Tape, Var};
pub use error::{Error, Result};
pub use params::{BufferUpdate, Ctx, ParamId, ParamStore};
pub use tensor::Tensor;
