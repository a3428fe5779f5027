//! Controllable human motion prediction with per-chain recurrent VAE-GANs
//! joined by a learned aggregation layer.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod kinematics;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod render;
pub mod training;

pub use error::{Error, Result};
