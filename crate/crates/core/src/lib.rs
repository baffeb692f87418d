pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod seed;

pub use error::{LabError, Result};
