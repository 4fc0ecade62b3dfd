pub mod checkpoint;
pub mod config;
pub mod continual;
pub mod error;
pub mod eval;
pub mod mapping;
pub mod pipeline;
pub mod planner;
pub mod replay;
pub mod rng;
pub mod scoring;
pub mod sensornet;
pub mod supervision;
pub mod synthworld;
pub mod tape;
pub mod vismodel;

pub use error::{Error, Result};
