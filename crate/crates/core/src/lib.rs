pub mod autograd;
pub mod data;
pub mod error;
pub mod eval_report;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
