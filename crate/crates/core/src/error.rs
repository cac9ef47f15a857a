use std::fmt;

/// Errors emitted by the gradient kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes for the requested operation.
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// A scalar parameter is outside its valid range.
    InvalidParameter { what: String },
    /// Attention scores are too large for `exp` at double precision.
    RangeOverflow { max_score: f64 },
    /// The requested polynomial degree needs more feature columns than the cap allows.
    CapacityExceeded {
        degree: usize,
        rank: usize,
        cap: usize,
    },
    /// A truncated kernel produced a nonpositive row sum; the factorization is unusable.
    DegenerateRowSum { row: usize, sum: f64 },
    /// A probability left the domain of `log`.
    NumericalDomain { what: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { op, lhs, rhs } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::InvalidParameter { what } => write!(f, "invalid parameter: {what}"),
            Error::RangeOverflow { max_score } => write!(
                f,
                "attention score magnitude {max_score:.3e} overflows exp; reduce the entry bound R"
            ),
            Error::CapacityExceeded { degree, rank, cap } => write!(
                f,
                "degree {degree} needs rank {rank}, above the cap {cap}"
            ),
            Error::DegenerateRowSum { row, sum } => write!(
                f,
                "approximate kernel row {row} sums to {sum:.3e}; raise the Taylor degree"
            ),
            Error::NumericalDomain { what } => write!(f, "numerical domain error: {what}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
