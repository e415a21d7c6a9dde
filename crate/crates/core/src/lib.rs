pub mod calibration;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod io;
pub mod metrics;
pub mod ot;
pub mod pipeline;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
