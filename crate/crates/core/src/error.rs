use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrices must have at least one row and one column, got {0:?}")]
    EmptyShape((usize, usize)),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("{op} is not supported on the {backend} backend")]
    UnsupportedBackend { op: &'static str, backend: &'static str },

    #[error("softmax column {0} is entirely -inf")]
    DegenerateColumn(usize),

    #[error("softplus requires beta > 0, got {0}")]
    InvalidBeta(f64),

    #[error("mask requires a square matrix, got {0:?}")]
    NonSquare((usize, usize)),

    #[error("index {index} out of range for {what} (size {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("variable {var} out of range for a {n}x{p} input")]
    VariableOutOfRange { var: String, n: usize, p: usize },

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("block {block}: {source}")]
    Chain {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported product at {0}: both factors contain max/min")]
    UnsupportedProduct(String),

    #[error("expression too large: {0}")]
    TooLarge(String),

    #[error("expected a form of degree <= {max}, found degree {found}")]
    DegreeTooHigh { max: u32, found: u32 },

    #[error("feed-forward net has {0} hidden layers, expected exactly one")]
    HiddenLayers(usize),

    #[error("faithful construction needs {needed} {what}, cap is {cap}; use pruned mode")]
    ResourceCap { what: &'static str, needed: usize, cap: usize },

    #[error("output column {column} depends on {var}, which lies in a later column")]
    NotAutoregressive { column: usize, var: String },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn in_block(self, block: usize) -> Error {
        Error::Chain {
            block,
            source: Box::new(self),
        }
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
        Error::Shape { op, left, right }
    }
}
