pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objective;
pub mod optim;
pub mod peft;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
