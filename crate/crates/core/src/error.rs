use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value at parameter `{param}` entry {index}")]
    NonFinite { param: String, index: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("all positions masked in {0}")]
    AllMasked(&'static str),

    #[error("ontology line {line}: {detail}")]
    OntologyParse { line: usize, detail: String },

    #[error("ontology cycle through edge {child} -> {parent}")]
    OntologyCycle { child: String, parent: String },

    #[error("ontology node `{0}` has no path to the root")]
    OntologyOrphan(String),

    #[error("invalid ontology: {0}")]
    Ontology(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid time grid: {0}")]
    Time(String),

    #[error("invalid journey {id}: {detail}")]
    Journey { id: u64, detail: String },

    #[error("corpus line {line}: {detail}")]
    CorpusParse { line: usize, detail: String },

    #[error("unknown code {0}")]
    UnknownCode(usize),

    #[error("invalid labels: {0}")]
    Labels(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
