//! Offline reinforcement-learning critics for task-oriented dialogue.
//!
//! The crate trains goal-conditioned recurrent critics on static dialogue
//! corpora and uses them two ways: as an evaluator that scores any fixed
//! policy without interacting with users (fitted-Q evaluation), and as the
//! value function for optimizing latent-action policies with a
//! policy-in-latent-space actor-critic. A deterministic miniature dialogue
//! environment provides ground truth for both.

pub mod corpus;
pub mod critic;
pub mod dialenv;
pub mod error;
pub mod evaluator;
pub mod latent;
pub mod numerics;
pub mod plas;
pub mod policy;

pub use error::{Error, Result};
