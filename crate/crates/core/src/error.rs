use thiserror::Error;

/// Broad failure class, used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: wrong shapes, bad indices, violated preconditions.
    Validation,
    /// The input was acceptable but the numerics failed.
    Numerical,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("duplicate species name `{0}`")]
    DuplicateSpecies(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("dense superoperator for D={d} exceeds the dense budget D<={budget}")]
    TooLargeForDense { d: usize, budget: usize },
    #[error("matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(String),
    #[error("species index {index} out of range (q={count})")]
    BadSpecies { index: usize, count: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl CoreError {
    pub fn code(&self) -> &'static str {
        match self {
            CoreError::DuplicateSpecies(_) => "DuplicateSpecies",
            CoreError::ShapeError(_) => "ShapeError",
            CoreError::TooLargeForDense { .. } => "TooLargeForDense",
            CoreError::NotHermitian(_) => "NotHermitian",
            CoreError::NonFinite(_) => "NonFinite",
            CoreError::BadSpecies { .. } => "BadSpecies",
            CoreError::Invalid(_) => "Invalid",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::TooLargeForDense { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Validation,
        }
    }
}

/// Error from any module, with a stable code string.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Regularity(#[from] crate::regularity::RegularityError),
    #[error(transparent)]
    Gauge(#[from] crate::gauge::GaugeError),
    #[error(transparent)]
    Finite(#[from] crate::finite::FiniteError),
    #[error(transparent)]
    Uniform(#[from] crate::uniform::UniformError),
    #[error(transparent)]
    Tangent(#[from] crate::tangent::TangentError),
    #[error(transparent)]
    Lattice(#[from] crate::lattice::LatticeError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Core(e) => e.code(),
            Error::Regularity(e) => e.code(),
            Error::Gauge(e) => e.code(),
            Error::Finite(e) => e.code(),
            Error::Uniform(e) => e.code(),
            Error::Tangent(e) => e.code(),
            Error::Lattice(e) => e.code(),
            Error::Io(e) => e.code(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Core(e) => e.class(),
            Error::Regularity(e) => e.class(),
            Error::Gauge(e) => e.class(),
            Error::Finite(e) => e.class(),
            Error::Uniform(e) => e.class(),
            Error::Tangent(e) => e.class(),
            Error::Lattice(e) => e.class(),
            Error::Io(_) => ErrorClass::Validation,
        }
    }
}
