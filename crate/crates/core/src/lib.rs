pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod quant;
pub mod regularizer;
pub mod report;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{Matrix, SvdFactors};
