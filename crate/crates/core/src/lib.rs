//! Unified progressive depth pruning.
//!
//! A baseline network is paired block-by-block with "pruned" blocks whose
//! interior nonlinearities are removed, trained as a weight-sharing supernet,
//! searched for the best set of blocks to prune, progressively trained from
//! the baseline flow into the pruned flow, and finally reparameterized so
//! that each pruned block collapses into a single convolution.

pub mod error;
pub mod graph;
pub mod merge;
pub mod zoo;
pub mod data;
pub mod supernet;
pub mod progressive;
pub mod search;
pub mod train;
pub mod pipeline;

pub use error::{Error, Result};
