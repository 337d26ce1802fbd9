use thiserror::Error;

/// Grid axis, in `(temporal, height, width)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    T,
    H,
    W,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::T, Axis::H, Axis::W];
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::T => write!(f, "t"),
            Axis::H => write!(f, "h"),
            Axis::W => write!(f, "w"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("axis {axis} has zero extent")]
    ZeroExtent { axis: Axis },

    #[error("coordinate {value} out of bounds on axis {axis} (extent {extent})")]
    OutOfBounds {
        axis: Axis,
        value: usize,
        extent: usize,
    },

    #[error("sequence index {index} out of range for {count} tokens")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("block index {block} out of range for {count} blocks")]
    BlockOutOfRange { block: usize, count: usize },

    #[error("{what}: {num} is not divisible by {den} on axis {axis}")]
    NonDivisible {
        what: &'static str,
        axis: Axis,
        num: usize,
        den: usize,
    },

    #[error("invalid mask spec: {0}")]
    InvalidSpec(String),

    #[error("{what}: expected shape ({expected_rows}, {expected_cols}), got ({rows}, {cols})")]
    ShapeMismatch {
        what: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("{what}: expected {expected} matrices, got {got}")]
    LayerCountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("query row {row} is fully masked; softmax is undefined")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("no mask assigned for layer {layer}, head {head}")]
    MissingAssignment { layer: usize, head: usize },

    #[error("pattern list is empty")]
    EmptyPatternList,

    #[error("pattern list must end with the full mask")]
    LastPatternNotFull,

    #[error(
        "pattern list is not ordered by descending sparsity: \
         pattern {index} has sparsity {sparsity:.6} after {prev:.6}"
    )]
    PatternsNotSorted {
        index: usize,
        sparsity: f64,
        prev: f64,
    },

    #[error("need at least 2 prompts, got {got}")]
    TooFewPrompts { got: usize },

    #[error("loss weight must be non-negative, got {value}")]
    NegativeWeight { value: f64 },

    #[error("tensor file: {0}")]
    TensorFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
