//! Learned, sample-dependent attention dropout.
//!
//! A defender and an attacker encoder train side by side on the same
//! batches; the attacker's attention matrices are masked by a small
//! generator network, and the generator is trained with REINFORCE on the
//! outcome of periodic defender-versus-attacker evaluations. The crate also
//! carries the fixed-rate baselines (attention dropout, LayerDrop, attention
//! LayerDrop, scheduled Bernoulli dropout), synthetic tasks, and a CLI.

pub mod attention;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod numkernel;
pub mod par;
pub mod policygrad;
pub mod regularizers;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
