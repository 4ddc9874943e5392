//! Task-oriented feature compression for multi-camera edge inference.
//!
//! Devices extract compact features from video frames, quantize them to
//! integers and range-code them under learned entropy models: a hyperprior
//! model for bootstrap frames and a temporal conditional model once enough
//! history exists. The server decodes each device's stream, fuses current
//! and past features and predicts a ground-plane occupancy grid.

pub mod diffcore;
pub mod entropy_models;
pub mod error;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod quantizer;
pub mod range_coder;
pub mod simtask_harness;
pub mod training;

pub use error::{Error, Result};
