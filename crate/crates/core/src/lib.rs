//! Distributed stochastic approximation over random gossip networks:
//! simulation of the recursion, closed-form asymptotic covariance, and a
//! Monte Carlo harness comparing the two.

pub mod asymptotics;
pub mod commands;
pub mod config;
pub mod engine;
pub mod harness;
pub mod error;
pub mod model;
pub mod numerics;
pub mod presets;
pub mod protocols;

pub use error::{Error, Result};
