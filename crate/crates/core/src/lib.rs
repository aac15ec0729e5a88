pub mod error;
pub mod metrics;
pub mod autoconfig;
pub mod cli;
pub mod nn;
pub mod phantom;
pub mod synergy_net;
pub mod training;
pub(crate) mod stats;
pub mod volume;

pub use error::{Error, Result};
