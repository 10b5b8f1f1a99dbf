//! Dense-to-MoE surgery: find redundant layer blocks from activation
//! similarity, fuse each block into one sparse layer, and estimate the
//! latency and memory of the result.

mod binio;
pub mod config;
pub mod cost;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod par;
pub mod search;
pub mod similarity;
pub mod surgery;
pub mod trace;
pub mod tradeoff;
pub mod weights;

pub use binio::storage_round;
pub use error::{Error, Result};
