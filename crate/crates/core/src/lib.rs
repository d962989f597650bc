//! Multi-domain sequential recommendation with text and item-ID encoders.

pub mod analysis;
pub mod baseline_id;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod textualize;
pub mod trainer;

pub use error::{Error, Result};
