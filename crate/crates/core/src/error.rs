//! Error type shared by all modules.

use thiserror::Error;

/// Coarse error class used by callers (e.g. the CLI) to map errors to
/// exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid configuration or specification values.
    Schema,
    /// Filesystem / serialization failures.
    Io,
    /// Non-finite values, degenerate vectors, rank problems.
    Numeric,
    /// Contract violations of the data itself (splits, classes, pairs).
    Domain,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has (near-)zero norm: {norm}")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("need at least 2 samples for PCA, got {got}")]
    InsufficientSamples { got: usize },

    #[error("covariance has only {available} nonzero eigenvalues, requested {requested}")]
    RankDeficient { available: usize, requested: usize },

    #[error("non-finite value encountered in {context}")]
    NonFiniteValue { context: String },

    #[error("non-finite gradient encountered in {context}")]
    NonFiniteGradient { context: String },

    #[error("feature map has no spatial locations")]
    EmptyMap,

    #[error("model has no classification head")]
    MissingHead,

    #[error("forward trace does not match parameters: {context}")]
    TraceMismatch { context: String },

    #[error("invalid specification: {context}")]
    BadSpec { context: String },

    #[error("distance must be non-negative, got {got}")]
    NegativeDistance { got: f64 },

    #[error("target class {target} out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },

    #[error("class {class} has no items")]
    EmptyClass { class: u32 },

    #[error("class {class} has fewer than 2 items")]
    SingletonClass { class: u32 },

    #[error("dataset has a single class; need at least 2")]
    SingleClassDataset,

    #[error("validation split has no usable queries or database items")]
    EmptyValidation,

    #[error("query of class {class} has no relevant database item")]
    NoRelevant { class: u32 },

    #[error("positive-pair mean {pos_mean} is not below negative-pair mean {neg_mean}")]
    InvertedDistributions { pos_mean: f64, neg_mean: f64 },

    #[error("need at least 3 classes to split, got {got}")]
    TooFewClasses { got: usize },

    #[error("class {class} has {got} items; query classes need at least 3")]
    ClassTooSmall { class: u32, got: usize },

    #[error("invalid margins: require 0 <= alpha1 < alpha2 <= 2, got ({alpha1}, {alpha2})")]
    BadMargins { alpha1: f64, alpha2: f64 },

    #[error("{path}: malformed {kind} at line {line}: {context}")]
    Parse {
        path: String,
        kind: &'static str,
        line: usize,
        context: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            BadSpec { .. } | BadMargins { .. } | Parse { .. } => ErrorClass::Schema,
            Io { .. } => ErrorClass::Io,
            ZeroVector { .. }
            | NonFiniteValue { .. }
            | NonFiniteGradient { .. }
            | InsufficientSamples { .. }
            | RankDeficient { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Domain,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
