use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // kb
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: duplicate title {title:?}")]
    DuplicateTitle { line: usize, title: String },
    #[error("line {line}: duplicate entity id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: empty title")]
    EmptyTitle { line: usize },
    #[error("line {line}: unknown entity id {id:?}")]
    UnknownEntity { line: usize, id: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("prior {0} is outside [0, 1]")]
    OutOfRange(f64),

    // text
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("span {start}..{end} is out of bounds for a document of {len} characters")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("span {start}..{end} does not fall on token boundaries")]
    SpanSplitsToken { start: usize, end: usize },
    #[error("invalid window {window} / stride {stride}")]
    InvalidWindow { window: usize, stride: usize },
    #[error("truncated document has {len} tokens, budget is {budget}")]
    DocBudgetExceeded { len: usize, budget: usize },
    #[error("vocabulary has no <unk> token")]
    MissingUnk,

    // retriever
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("entity store is empty")]
    EmptyStore,
    #[error("positive set is empty")]
    EmptyPositives,
    #[error("need {needed} non-gold entities but only {available} are available")]
    InsufficientEntities { needed: usize, available: usize },

    // fusion model
    #[error("{got} candidates exceed the configured maximum of {max}")]
    TooManyCandidates { got: usize, max: usize },
    #[error("sequence of {len} tokens exceeds the maximum segment length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("target of {len} tokens exceeds the maximum of {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("prefix trie has no continuation at depth {depth}")]
    DeadEnd { depth: usize },
    #[error("prefix trie is empty")]
    EmptyTrie,
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("loss diverged at step {step}")]
    DivergenceDetected { step: usize },

    // output grammar
    #[error("segment {0} has no entity/mention separator")]
    MalformedSegment(usize),
    #[error("segment {0} has an empty mention list")]
    EmptyMentionList(usize),
    #[error("segment {0} repeats an entity title")]
    DuplicateEntity(usize),
    #[error("invalid prediction: {0}")]
    InvalidPrediction(String),

    // linker
    #[error("no candidates for mention {surface:?}")]
    NoCandidates { surface: String },

    // eval
    #[error("input is empty")]
    EmptyInput,
    #[error("document {doc_id:?} is not present on both sides")]
    DocMismatch { doc_id: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad inputs or configuration rather than by a failure
    /// during computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. }
                | Error::NonFiniteGradient { .. }
                | Error::DivergenceDetected { .. }
                | Error::DeadEnd { .. }
        )
    }

    /// The variant name, e.g. `DuplicateTitle`.
    pub fn name(&self) -> String {
        let dbg = format!("{self:?}");
        dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or_default().to_string()
    }
}
