//! Two-timescale mean-field Langevin training of two-layer networks.
//!
//! The second layer is solved exactly as kernel ridge regression on the
//! kernel induced by the current first layer; the first-layer particles then
//! take one noisy gradient step on the first variation of the resulting
//! limiting functional.

pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod feature_map;
pub mod label_noise;
pub mod linalg;
pub mod particle_measure;
pub mod ridge;
pub mod rng;

pub use error::{Error, Result};
