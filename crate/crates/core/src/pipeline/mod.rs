//! Stage orchestration: config, manifests and the stage runners.

mod config;
mod fixture;
mod manifest;
mod stages;

pub use config::{AnswerMode, CorpusFormat, EncoderKind, PipelineConfig, CONFIG_KEYS, ENV_PREFIX};
pub use fixture::{write_synthetic_fixture, FixtureFiles};
pub use manifest::{sha256_file, Manifest};
pub use stages::*;
