pub mod error;
pub mod etf_lab;
pub mod feature_store;
pub mod gaussian_stats;
pub mod metrics;
pub mod random;
pub mod scorers;
pub mod synthetic_bench;
pub mod tuner;

pub use error::{Error, Result};
