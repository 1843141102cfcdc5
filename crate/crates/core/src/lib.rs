//! Offline actor-critic learning with double conservative value estimates.
//!
//! * [`mdp`] and [`oracle`] hold the exact tabular model of the penalized
//!   V/Q fixed point and its error bounds.
//! * [`nn`] and [`losses`] provide the MLP stack and training objectives.
//! * [`trainer`] runs the full critic/actor loop on an [`mdp::OfflineDataset`].
//! * [`envs`] and [`dataset_io`] generate and persist toy-control datasets.

pub mod cli;
pub mod dataset_io;
pub mod envs;
pub mod error;
pub mod losses;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod trainer;

pub use error::{DceError, Result};
