pub mod clustering;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod graphs;
pub mod ingest;
pub mod matching;
pub mod numerics;
pub mod pipeline;
pub mod projection;
pub mod superpixels;

pub use error::{Error, Result};
