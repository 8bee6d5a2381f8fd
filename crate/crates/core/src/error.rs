use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary size {requested} leaves no room beyond the {specials} special tokens")]
    VocabularyTooSmall { requested: usize, specials: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("random-ending negatives need at least 2 examples, got {0}")]
    TooFewExamples(usize),
    #[error("lm-sample negatives need a trained language model")]
    MissingLanguageModel,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("training data covers only {0} of 3 NLI labels")]
    SingleClass(usize),
    #[error("unknown scorer `{0}`")]
    UnknownScorer(String),
    #[error("scorer `{0}` is not part of the active set")]
    InactiveScorer(String),
    #[error("need at least {needed} candidates, got {got}")]
    TooFewCandidates { needed: usize, got: usize },
    #[error("length mismatch: {0} generations vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("artifact {path}: {reason}")]
    BadArtifact { path: PathBuf, reason: String },
    #[error("vocabulary hash mismatch in {0}")]
    VocabularyMismatch(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
