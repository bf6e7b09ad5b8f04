pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
