//! Numerical laboratory for neural tangent kernel (NTK) alignment.
//!
//! The crate trains small fully connected networks with exact per-example
//! gradients, tracks empirical NTK Gram matrices over training, simulates the
//! optimal-feature-evolution (OFE) dynamical system, and checks closed-form
//! predictions (conservation laws, final-kernel identities, alignment rates,
//! specialization ratios) against simulation.
//!
//! Module map:
//! - [`data`]: synthetic dataset generators and an IDX-format MNIST reader
//! - [`models`]: deep linear / ReLU MLPs, exact gradients, gradient descent
//! - [`ntk`]: Gram matrices, subkernels, V/W decomposition, traced kernel
//! - [`metrics`]: alignment, KSM, bilinear probes, eigenvector diagnostics
//! - [`ofe`]: the optimal-feature-evolution ODE system and its closed forms
//! - [`theory`]: closed-form rate predictions evaluated alongside simulation
//! - [`harness`]: config-driven experiment runner with persistence
//! - [`cli`]: command-line front end
//!
//! Support modules: [`rng`] (seeded, stream-split randomness), [`linalg`]
//! (small dense decompositions and power iteration), [`io`] (trace CSV and
//! binary snapshot containers), [`plot`] (deterministic SVG rendering).

pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod ntk;
pub mod ofe;
pub mod plot;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
