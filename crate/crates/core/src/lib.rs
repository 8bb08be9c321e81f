pub mod augment;
pub mod correlation;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod numerics;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
