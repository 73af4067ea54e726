//! Offline hierarchical reinforcement learning.
//!
//! An online option learner is trained inside a pessimistic synthetic MDP
//! built from a fixed transition dataset: an ensemble of residual dynamics
//! and reward networks whose disagreement ends episodes with a penalty, and
//! (optionally) the latent action space of a state/goal-conditioned CVAE.

pub mod agents;
pub mod cvae;
pub mod data;
pub mod env;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod pmdp;
pub mod util;
pub mod world;

pub use error::{Error, Result};
