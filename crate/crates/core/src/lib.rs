pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
