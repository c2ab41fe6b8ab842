//! Corpora, metrics, persistence, benchmarks and the command-line front end
//! for `streammem-core`.

pub mod bankfile;
pub mod bench;
mod codec;
pub mod corpus;
pub mod error;
pub mod indexfile;
pub mod metrics;

pub use error::{Error, FormatError, Result};
