use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected `MOEL`")]
    BadMagic,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload length mismatch: header expects {expected} bytes, found {actual}")]
    PayloadLength { expected: u64, actual: u64 },

    #[error("tensor `{name}` byte range [{start}, {end}) does not match its shape")]
    RangeShapeMismatch { name: String, start: u64, end: u64 },

    #[error("overlapping byte ranges for tensors `{0}` and `{1}`")]
    OverlappingRanges(String, String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("top-k {k} exceeds expert count {n}")]
    TopKTooLarge { k: usize, n: usize },

    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("layer {layer} out of range (model has {num_layers} layers)")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("layer {0} is a dense layer")]
    DenseLayer(usize),

    #[error("undefined similarity: zero vector")]
    ZeroVector,

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("degenerate regression: zero variance in {0}")]
    DegenerateRegression(&'static str),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("selected layers have different expert counts ({0} vs {1})")]
    HeterogeneousExperts(usize, usize),

    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
