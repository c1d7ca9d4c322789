use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Hurwitz: eigenvalue {re:+.6e} {im:+.6e}i")]
    NonHurwitz { re: f64, im: f64 },

    #[error("H2 norm requires zero feedthrough (max |D| = {0:e})")]
    NonzeroFeedthrough(f64),

    #[error("bilinear transform is singular: I - A*dt/2 not invertible")]
    SingularTransform,

    #[error("feedback interconnection is ill-posed: I + Dc*Dp is singular")]
    IllPosed,

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("effective mass matrix is singular")]
    SingularMass,

    #[error("velocity variance {0:e} is too small for the equivalent friction gain")]
    DegenerateVariance(f64),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("closed loop became unstable at iteration {iteration} (eigenvalue real part {re:e})")]
    UnstableIterate { iteration: usize, re: f64 },

    #[error("SDP solver failed: {0}")]
    SolverInfeasible(String),

    #[error("certificate rejected: {0}")]
    CertificateRejected(String),

    #[error("controller has no feasibility certificate attached")]
    MissingCertificate,

    #[error("V is not orthogonal (|VV' - I|_F = {0:e})")]
    NonUnitaryV(f64),

    #[error("projection infeasible: {0}")]
    ProjectionInfeasible(String),

    #[error("synthesis failed: {0}")]
    SynthesisFailed(String),

    #[error("loss-model regressors are rank deficient")]
    RankDeficient,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable numeric code, shared with the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Dimension(_) => 10,
            Error::NonHurwitz { .. } => 11,
            Error::NonzeroFeedthrough(_) => 12,
            Error::SingularTransform => 13,
            Error::IllPosed => 14,
            Error::Singular(_) => 15,
            Error::SingularMass => 16,
            Error::DegenerateVariance(_) => 20,
            Error::NoConvergence { .. } => 21,
            Error::UnstableIterate { .. } => 22,
            Error::SolverInfeasible(_) => 30,
            Error::CertificateRejected(_) => 31,
            Error::MissingCertificate => 32,
            Error::NonUnitaryV(_) => 33,
            Error::ProjectionInfeasible(_) => 34,
            Error::SynthesisFailed(_) => 35,
            Error::RankDeficient => 40,
            Error::InvalidParameter(_) => 50,
            Error::Config(_) => 51,
            Error::Io(_) => 60,
            Error::Json(_) => 61,
            Error::Csv(_) => 62,
        }
    }
}
