pub mod align;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod filter;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reader;
pub mod selector;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
