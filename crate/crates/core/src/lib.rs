pub mod autodiff;
pub mod codec;
pub mod datapipe;
pub mod error;
pub mod imbalance;
pub mod metrics;
pub mod nn;
pub mod pkpd;
pub mod synth;

pub use error::{Error, Result};
