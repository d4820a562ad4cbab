//! Energy-based open-world detection: a fixed simplex-ETF scoring basis,
//! the losses that train a toy detection head around it, and a synthetic
//! incremental benchmark with the evaluation harness that measures it.

pub mod bbox;
pub mod config;
pub mod energy;
pub mod error;
pub mod etf;
pub mod eval;
pub mod experiment;
pub mod head;
pub mod losses;
pub mod matching;
pub mod sim;

pub use error::{Error, Result};
