pub mod augment;
pub mod autodiff;
pub mod bke;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
