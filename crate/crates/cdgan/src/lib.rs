//! Std companion to `cdgan-core`: image folders, checkpoints, run configs,
//! the experiment runner and the `cdgan` command line.

pub mod chart;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod experiment;
pub mod training;

pub use error::{Error, Result};
