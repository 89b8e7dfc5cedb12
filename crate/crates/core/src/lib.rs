//! Few-shot class-incremental learning benchmark toolkit.
//!
//! The crate is split along the lines of an experiment:
//!
//! * [`protocol`] describes base/incremental session splits and materializes
//!   leakage-free views over a dataset.
//! * [`data`] ingests CIFAR-100 binaries, image folders and synthetic data.
//! * [`nn`] and [`model`] provide a small residual backbone with a
//!   session-expandable classifier head and checkpointing.
//! * [`imbalance`] holds the resampling, reweighting and optimizer plugins.
//! * [`train`] runs joint and incremental strategies.
//! * [`metrics`] computes session accuracies, gAcc, FP/FN rates and CKA.
//! * [`search`] is the random-search harness that composes the plugins.

pub mod data;
pub mod error;
pub mod imbalance;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod search;
pub mod train;
pub mod util;

pub use error::{Error, Result};
