//! Adversarial counterfactual augmentation on a synthetic ageing world.

pub mod augment;
pub mod autodiff;
pub mod encoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod synthworld;

pub use error::{Error, Result};
