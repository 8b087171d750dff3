use std::fmt;

use thiserror::Error;

/// Row/column extent of a dense array. Scalars are `1x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("gather index {index} out of range for source of {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("backward seed must be a scalar, got {0}")]
    NonScalarSeed(Shape),

    #[error("backward called on a graph built without gradient recording")]
    NotRecording,

    #[error("non-finite function value during finite-difference check at coordinate {coord}")]
    NonFiniteEvaluation { coord: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary mismatch: {0}")]
    Vocab(String),

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("unknown objective `{name}` (known: {known})")]
    UnknownObjective { name: String, known: String },

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
