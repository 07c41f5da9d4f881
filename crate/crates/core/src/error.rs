use thiserror::Error;

/// Errors raised by the construction. Variants name the violated precondition.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("lambda override entry {value} at index {index} is not a positive multiple of 85")]
    NotMultipleOf85 { index: usize, value: u64 },

    #[error("frequency lambda_{q} overflows the integer range")]
    LambdaOverflow { q: i64 },

    #[error("index {q} outside the parameter table ({reason})")]
    IndexOutOfTable { q: i64, reason: &'static str },

    #[error("gamma argument outside the admissible ball: c = {c:?}")]
    OutOfBall { c: [f64; 3] },

    #[error(
        "amplitude argument outside the admissible ball at sample {sample}, point ({ix}, {iy}): \
         norm {norm:e} > eps {eps:e}"
    )]
    AmplitudeOutOfBall {
        sample: usize,
        ix: usize,
        iy: usize,
        norm: f64,
        eps: f64,
    },

    #[error("grid size {0} is not a power of two >= 4")]
    BadGrid(usize),

    #[error("insufficient dealias headroom: bands {a} + {b} exceed {limit}")]
    DealiasOverflow { a: usize, b: usize, limit: usize },

    #[error("shell around radius {reach} exceeds the grid band limit {limit}")]
    ShellOverflow { reach: usize, limit: usize },

    #[error("negative power {s} applied to a field with nonzero mean {mean:e}")]
    NonzeroMean { s: f64, mean: f64 },

    #[error("fields live on different grids ({0} vs {1})")]
    GridMismatch(usize, usize),

    #[error("time grids differ")]
    TimeGridMismatch,

    #[error("time step {dt:e} exceeds tau/8 = {limit:e}")]
    TimeStepTooLarge { dt: f64, limit: f64 },

    #[error("slab of {nt} samples is too short for a stencil of {needed}")]
    SlabTooShort { nt: usize, needed: usize },

    #[error("CFL violation: {required} substeps required, {given} given")]
    Cfl { required: usize, given: usize },

    #[error("slab does not cover the support of chi_{index}")]
    SlabCoverage { index: i64 },

    #[error("initial velocity rejected: {0}")]
    InitialData(String),

    #[error("state invariant violated: {0}")]
    State(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("I/O error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
