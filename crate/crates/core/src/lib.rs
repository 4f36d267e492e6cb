//! Depth-adaptive Sentence-State LSTM text classifier.

pub mod batch;
pub mod bench;
pub mod checkpoint;
pub mod classify;
pub mod config;
pub mod data;
pub mod depth;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod model;
pub mod params;
pub mod seq;
pub mod slstm;
pub mod train;

pub use error::{Error, Result};
