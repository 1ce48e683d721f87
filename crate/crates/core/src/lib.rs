pub mod audio;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod reconstruct;
pub mod tokenizer;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
