//! Speech and scene-graph grounding: phonetic audio synthesis, a CTC
//! recogniser, rule-based scene graphs, the graph-attention fusion grounder,
//! a synthetic dataset generator and the experiment pipeline.

pub mod asr;
pub mod datagen;
pub mod error;
pub mod grounder;
pub mod phonetics;
pub mod pipeline;
pub mod scenegraph;

pub use error::{Error, Result};
pub use numcore;
