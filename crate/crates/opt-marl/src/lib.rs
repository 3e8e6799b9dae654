//! Interaction-pattern disentangling for cooperative multi-agent RL.
//!
//! The crate bundles:
//! - exact sparsemax / simplex-projection numerics with a finite-difference
//!   gradient-check harness ([`numerics`]),
//! - a small reverse-mode tape ([`tape`]) backing all analytic gradients,
//! - the prototype-attention block with its contrastive disagreement and
//!   conditional-mutual-information losses ([`model`]),
//! - a recurrent per-agent utility network and a monotone mixing network,
//! - a multi-task predator-prey grid world with unseen-task splits ([`env`]),
//! - an episode-replay trainer with RMSprop, target networks, metrics and
//!   checkpoints ([`trainer`]),
//! - the command-line surface ([`cli`]).
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod protodump;
pub mod tape;
pub mod trainer;

pub use error::{OptError, Result};
