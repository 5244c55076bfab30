//! Context-embedding multi-scale ConvLSTM for frame prediction.
//!
//! The crate holds the recurrent cell and stacked predictor ([`cells`]), the
//! parameter and optimizer machinery ([`nn`], [`checkpoint`]), a synthetic
//! moving-shapes dataset ([`data`]), quality metrics ([`metrics`]), the
//! training and evaluation loops ([`train`]) and the command line ([`cli`]).

pub mod ablation;
pub mod cells;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod export;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod nn;
mod seed;
pub mod train;

pub use config::{ModelConfig, RunConfig, SamplingSchedule};
pub use error::{Error, Result};
