pub mod baselines;
pub mod controller;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod objectives;

pub use error::{Error, Result};
