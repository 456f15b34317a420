use crate::grid::DyadicInterval;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid configuration: {0}")]
    InvalidGrid(String),

    #[error("interval n={n} j={j} is outside the grid")]
    InvalidInterval { n: u32, j: u64 },

    #[error("interval {0} is at the finest scale of the grid and has no children")]
    ScaleOverflow(DyadicInterval),

    #[error("{inner} is not strictly contained in {outer}")]
    NotContained {
        inner: DyadicInterval,
        outer: DyadicInterval,
    },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("sigma and w share an atom at cell k={0}")]
    CommonAtom(u64),

    #[error("invalid truncation window: eps={eps}, delta={delta}")]
    InvalidWindow { eps: f64, delta: f64 },

    #[error("evaluation point {0} coincides with an atom")]
    SingularPoint(f64),

    #[error("interval {0} has zero mass")]
    ZeroMass(DyadicInterval),

    #[error("interval {0} is degenerate: one child carries no mass")]
    Degenerate(DyadicInterval),

    #[error("function has {got} values, measure has {expected} atoms")]
    LengthMismatch { expected: usize, got: usize },

    #[error("pair collection is not admissible: {0}")]
    NotAdmissible(String),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("{0} is undefined for this pair")]
    Undefined(&'static str),

    #[error("malformed input: {0}")]
    Schema(String),

    #[error("internal invariant broken: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Errors caused by the caller's input rather than by a broken invariant.
    pub fn is_input(&self) -> bool {
        matches!(
            self,
            Error::InvalidGrid(_)
                | Error::InvalidInterval { .. }
                | Error::InvalidMeasure(_)
                | Error::CommonAtom(_)
                | Error::InvalidWindow { .. }
                | Error::Schema(_)
        )
    }
}
