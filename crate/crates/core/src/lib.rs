pub mod activations;
pub mod cbp;
pub mod config;
pub mod dbp;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod reference;
pub mod replay;
pub mod rng;
pub mod taskstream;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
