//! Multi-agent simulation and calibration engine.
//!
//! Agents of heterogeneous types share a single stochastic policy and are
//! trained by self-play toward a symmetric equilibrium; the distribution
//! parameters of the agent types (supertypes) are calibrated to external
//! targets either by a slow-timescale RL calibrator trained jointly with
//! the agents, or by a Gaussian-process Bayesian-optimization baseline.
//! A brute-force theory lab verifies the underlying equilibrium results
//! on finite games and tabular Markov games.
//!
//! The numeric core is generic over the scalar type; see [`Scalar`] and
//! the `*32`/`*64` aliases below.

pub mod bo;
pub mod calibrate;
pub mod error;
pub mod game;
pub mod linalg;
pub mod market;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;

