//! Chance-constrained trajectory optimization with conformal constraint tightening.
//!
//! A contraction-based tracking controller turns an offline set of disturbance
//! rollouts into a per-step score table. Weighted conformal quantiles of those
//! scores give ellipsoidal confidence sets around the nominal plan, and the
//! planner tightens state constraints deterministically by their support
//! function. A Gaussian-linearization baseline is included for comparison.

pub mod baseline;
pub mod conformal;
pub mod config;
pub mod contraction;
pub mod error;
pub mod io;
pub mod models;
pub mod montecarlo;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod tightening;
pub mod trajopt;

pub use error::{Error, Result};
