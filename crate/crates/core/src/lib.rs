//! In-context reinforcement learning with belief-conditioned transformer
//! policies: a two-phase pipeline (reward-belief VAE, then a causal
//! transformer trained to predict optimal actions from an in-context
//! dataset) plus the environments, dataset generation, classical bandit
//! baselines, and the online evaluation protocol around it.

pub mod bandits;
pub mod datagen;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod seed;
pub mod vae;

pub use error::{Error, Result};
pub use nn::{ParameterStore, Tensor};
