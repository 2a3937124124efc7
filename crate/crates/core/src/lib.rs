//! Two-tower image/text contrastive pre-training at desk scale.

mod bytes;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod imagination;
pub mod pipeline;

pub use config::{EncoderConfig, GeneratorConfig, LossMode, RunConfig, TrainerConfig, VisConfig};
pub use error::{Error, FormatFault, Result};
