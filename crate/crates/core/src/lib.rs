//! Tropical-cyclone structural summaries from infrared imagery, structural
//! forecasts along two pathways, and intensity guidance built on them.

pub mod analogs;
pub mod block;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod latent;
pub mod intensity;
pub mod orb;
pub mod structfc;
pub mod synth;

pub use error::{Error, Result};
