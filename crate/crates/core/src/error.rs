use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("degenerate input at layer {layer}: {message}")]
    DegenerateLayer { layer: usize, message: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("scatter matrix N is singular (min eigenvalue {min_eigenvalue:e} < threshold {threshold:e})")]
    SingularScatter { min_eigenvalue: f64, threshold: f64 },

    #[error("f'_SSR(0) = {fprime0:e} is below the descent threshold {threshold:e}; no first-order break exists")]
    NoDescent { fprime0: f64, threshold: f64 },

    #[error("line search exhausted {steps} steps without breaking LSSR")]
    SearchFailure { steps: usize },

    #[error("no admissible direction found after {draws} draws ({what})")]
    SeparationFailure { draws: usize, what: &'static str },

    #[error("dataset has {classes} classes; the binary synthesizer needs exactly 2 (use the multi-class path)")]
    NotBinary { classes: usize },

    #[error("points {a} and {b} carry different labels but became indistinguishable at layer {layer}")]
    CrossLabelMerge { layer: usize, a: usize, b: usize },

    #[error("ambiguous readout: prototypes {first} and {second} are equidistant (distance {distance:e})")]
    Ambiguous {
        first: usize,
        second: usize,
        distance: f64,
    },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("malformed network document: {0}")]
    Document(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
