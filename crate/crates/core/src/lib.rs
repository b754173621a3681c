//! Federated multi-agent PPO for mobile crowdsensing: the task and energy
//! model, the stochastic environment, the platform-side selection and
//! settlement, the learning stack, baselines and the experiment harness.

pub mod agent;
pub mod baselines;
pub mod config;
pub mod environment;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod mcsp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sim;

pub use error::{Error, Result};
