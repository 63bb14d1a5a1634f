//! Balanced fine-grained positive-unlabeled learning for multi-instance
//! anomaly detection under dual (bag-level and instance-level) imbalance.
//!
//! Bags are labelled normal (`+1`) iff every instance is normal. Training
//! treats instances of normal bags as labelled positives and instances of
//! anomalous bags as unlabeled, optimizes an attention-weighted balanced PU
//! risk, refines with per-bag pseudo labels, and calibrates the decision
//! threshold from the class prior.

pub mod bounds;
pub mod cli;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod train;

pub use dataset::{Bag, Dataset, ImbalanceSpec, Instance, Label, PriorLevel};
pub use error::{Error, Result};
