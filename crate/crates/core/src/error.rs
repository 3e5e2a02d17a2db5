use thiserror::Error;

/// Failures while decoding one of the binary or text artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {what} version {found} (this build reads version {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u16,
        expected: u16,
    },
    #[error("truncated {what}: {detail}")]
    Truncated { what: &'static str, detail: String },
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("trailing bytes after {what}: {count}")]
    TrailingBytes { what: &'static str, count: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("labeling error: {0}")]
    Labeling(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("classification error: {0}")]
    Classification(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },
    #[error(
        "LUT equivalence failure at layer {layer}, neuron {neuron}, table {table}, code {code}: table={table_value} reference={reference}"
    )]
    Equivalence {
        layer: usize,
        neuron: usize,
        table: String,
        code: usize,
        table_value: u16,
        reference: u16,
    },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("trace error: {0}")]
    Trace(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
