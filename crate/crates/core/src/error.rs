use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

/// Pipeline stage reported when a decomposition fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Accumulate,
    Whiten,
    PowerMethod,
    Recover,
    Refine,
    Amplify,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Accumulate => "moment accumulation",
            Stage::Whiten => "whitening",
            Stage::PowerMethod => "tensor power method",
            Stage::Recover => "parameter recovery",
            Stage::Refine => "refinement",
            Stage::Amplify => "amplification",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {context} (sample {index})")]
    NonFinite { context: &'static str, index: usize },

    #[error("empty sample set")]
    Empty,

    #[error("ill-conditioned {what}: singular value {sigma:e} below tolerance")]
    IllConditioned { what: &'static str, sigma: f64 },

    #[error("tensor is not symmetric (max deviation {deviation:e})")]
    NotSymmetric { deviation: f64 },

    #[error("no positive eigenvalue at deflation step {index} (value {value:e})")]
    NoPositiveEigenvalue { index: usize, value: f64 },

    #[error("class prior mass {mass} too small after clipping")]
    DegeneratePrior { mass: f64 },

    #[error("degenerate feature scale (B = 0)")]
    DegenerateScale,

    #[error("every estimate was discarded during amplification")]
    AmplificationFailed,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("zero potential: {0}")]
    ZeroPotential(String),

    #[error("position {t} out of admissible range {lo}..={hi}")]
    Position { t: usize, lo: usize, hi: usize },

    #[error("position {t}: {source}")]
    AtPosition {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(self, stage: Stage) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping stage and position wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::AtPosition { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures caused by conditioning or noise rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::IllConditioned { .. }
                | Error::NoPositiveEigenvalue { .. }
                | Error::DegeneratePrior { .. }
                | Error::AmplificationFailed
                | Error::NonFinite { .. }
                | Error::DegenerateScale
                | Error::NotSymmetric { .. }
        )
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
