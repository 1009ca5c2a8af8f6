//! Prompt-guided flow restoration.
//!
//! A degraded frame is restored by integrating a prompt-conditioned vector
//! field: a U-Net backbone predicts an anchor image, the displacement to the
//! anchor acts as a constant momentum term, a decayed tanh-squashed potential
//! gradient pulls the state toward the anchor, and a learned prompt field
//! steers the trajectory. Training differentiates through the unrolled
//! fixed-step Euler integration with a from-scratch f64 reverse-mode tape.

pub mod config;
pub mod data;
pub mod degrade;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
