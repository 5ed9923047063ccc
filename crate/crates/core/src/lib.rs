//! Streamflow modelling for basins with reservoirs: data ingestion and
//! normalization, reservoir attribution, an LSTM with manual backpropagation,
//! training, evaluation metrics, experiment orchestration and a synthetic
//! basin generator.

pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod lstm;
pub mod metrics;
pub mod reservoir;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
