//! Desk-scale simulator for federated parameter-efficient fine-tuning with
//! stochastic transformer-layer dropout, an online dropout-rate
//! configurator, and personalized layer sharing.

pub mod configurator;
pub mod cost;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod ptls;
pub mod stld;
pub mod tensor;

pub use error::{Error, Result};
