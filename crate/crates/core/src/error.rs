use thiserror::Error;

use numcore::NumError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("word not in lexicon: {0:?}")]
    UnknownWord(String),
    #[error("invalid phonetic model: {0}")]
    InvalidPhonetics(String),
    #[error("utterance needs {needed} frames but only {available} are available")]
    SequenceTooLong { needed: usize, available: usize },
    #[error("expected {expected} audio frames, got {actual}")]
    WrongFrameCount { expected: usize, actual: usize },
    #[error("label of length {label} is infeasible for {frames} frames")]
    LabelTooLong { label: usize, frames: usize },
    #[error("log-probability row {row} is not a distribution (sums to {sum})")]
    InvalidDistribution { row: usize, sum: f64 },
    #[error("position of object {0:?} is not finite")]
    NonFinitePosition(String),
    #[error("world model is empty")]
    EmptyWorld,
    #[error("scene graph has no nodes")]
    EmptyGraph,
    #[error("no graph node maps to the class vocabulary")]
    AllClassesMasked,
    #[error("valid length must be at least 1")]
    EmptySpeech,
    #[error("training diverged: {context}")]
    Diverged { context: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
