//! Probabilistically safe multi-agent trajectory planning under
//! non-Gaussian control noise.
//!
//! Agents follow a discrete-time unicycle model with an altitude channel.
//! Control disturbances may be Beta, uniform or Gaussian. The crate
//! propagates state moments up to degree four exactly, bounds pairwise
//! collision probabilities with the one-sided Vysochanskij–Petunin
//! inequality, and plans with a sequential receding-horizon protocol.
//! Monte Carlo tools validate every probabilistic claim.

pub mod cli;
pub mod config;
pub mod coordinator;
pub mod error;
mod float_serde;
pub mod moments;
pub mod nlp;
pub mod noise;
pub mod planner;
mod poly;
pub mod quadrature;
pub mod safety;
pub mod sim;
pub mod state;
pub mod validate;

pub use error::{Error, Result};
pub use state::{Control, NoiseSample, TrueState};
