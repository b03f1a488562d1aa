//! Bayesian joint estimation of dynamic metro network costs and
//! spatiotemporal passenger path choices from tap-in/tap-out trip records.
//!
//! Trip travel times are modelled as noisy sums of access, in-vehicle,
//! transfer and egress costs that follow a random walk over time intervals.
//! Path choice is a multinomial logit whose coefficients vary by origin and
//! interval through a kernelized CP factorization. Inference is a blocked
//! Gibbs sampler ([`gibbs::run`]).

pub mod assign;
pub mod choice;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod kernels;
pub mod network;
pub mod rng;
pub mod samplers;
pub mod simulate;
pub mod statespace;
pub mod stats;
pub mod store;

pub use config::RunConfig;
pub use error::{Error, ErrorCategory, Result};
pub use network::{build_network, NetworkModel, NetworkSpec};
