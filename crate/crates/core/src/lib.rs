//! Agent-based simulation of catastrophe insurance and reinsurance markets.

pub mod analytics;
pub mod config;
pub mod contracts;
pub mod error;
pub mod firms;
pub mod io;
pub mod market;
pub mod peril;
pub mod risk_model;
pub mod rng;
pub mod simulation;

pub use config::{load_config, Params};
pub use error::{Error, Result};
