//! Synthetic mobile-health app users for testing nudge policies.
//!
//! Users are Markov chains over app states whose transition probabilities
//! react to recently received nudges. Their simulated activity becomes event
//! logs and daily metrics, which bandit policies use to pick tomorrow's nudges.

pub mod behavior;
pub mod cli;
pub mod env_model;
pub mod error;
pub mod logkit;
pub mod markov_engine;
pub mod metrics;
pub mod rl_harness;
pub mod rng;
pub mod time;

pub use error::{Error, Result};
