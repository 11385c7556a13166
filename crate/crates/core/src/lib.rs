pub mod adapter;
pub mod cli;
pub mod data;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod multimodal;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
