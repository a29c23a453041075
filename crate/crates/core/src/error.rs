use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("ellipsoid prox root-finding did not converge after {iterations} iterations (bracket [{lo:e}, {hi:e}], residual {residual:e})")]
    RootFinding {
        iterations: usize,
        lo: f64,
        hi: f64,
        residual: f64,
    },

    #[error("oracle lacks the `{0}` capability")]
    MissingCapability(&'static str),

    #[error("rejection sampler for index {index} exceeded {cap} proposals (mu = {mu:e}, slope = {slope:e})")]
    SamplerCap {
        index: usize,
        cap: usize,
        mu: f64,
        slope: f64,
    },

    #[error("quadrature weights underflowed for index {index} (mu = {mu:e}, slope = {slope:e})")]
    QuadratureUnderflow { index: usize, mu: f64, slope: f64 },

    #[error("oracle failure at outer {t}, inner {k}, index {index}: {source}")]
    Oracle {
        t: usize,
        k: usize,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite iterate at outer {t}, inner {k}: {detail}")]
    NonFinite { t: usize, k: usize, detail: String },

    #[error("bound hypotheses violated: {0}")]
    Hypotheses(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that come from floating-point trouble rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::RootFinding { .. }
            | Error::SamplerCap { .. }
            | Error::QuadratureUnderflow { .. }
            | Error::NonFinite { .. } => true,
            Error::Oracle { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn at(self, t: usize, k: usize, index: usize) -> Error {
        Error::Oracle {
            t,
            k,
            index,
            source: Box::new(self),
        }
    }
}
