//! Teacher–student masked latent prediction pretraining for text and speech
//! sequences, built on a small reverse-mode differentiation engine.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distiller;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod optim;
pub mod params;
pub mod probe;
pub mod prenet;
pub mod tensor;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
