//! Mean-field gradient-flow laboratory for two-layer ReLU and leaky-ReLU
//! networks.
//!
//! A network is the empirical parameter measure `(1/m) Σ δ_θi` over neurons
//! `θ = (a, w, b)`. Training is the interacting-particle ODE
//! `θ̇_i = −∇_θ δR(π; θ_i)`, where `δR` is the velocity potential of the
//! population risk. The modules mirror the pieces of that system:
//!
//! * [`params`]: neurons, ensembles, the Minkowski cone and its symmetries.
//! * [`data`]: data laws, label models and the half-space regularity probe.
//! * [`loss`]: losses, clipping, augmented loss and Bayes-optimal predictors.
//! * [`field`]: realization, risk and the velocity potential with its gradient.
//! * [`flow`]: Euler / RK4 integration and the trajectory record.
//! * [`diagnostics`]: convergence verdicts, moment bounds and the sphere probe.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod flow;
pub mod loss;
pub mod params;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
