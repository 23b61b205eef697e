//! Boolean-aware attention for Transformer encoders.

pub mod attention;
pub mod bias;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cue;
pub mod encoder;
pub mod error;
pub mod experiment;
mod init;
pub mod numerics;
pub mod operators;
pub mod optim;
pub mod pretrain;
pub mod retrieval;
pub mod scope;
pub mod suite;

pub use error::{Error, Result};
