use thiserror::Error;

/// Failures reported by the numerical routines of this crate.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParabolicError {
    #[error("series has a nonzero average (|c_0| = {0:.3e})")]
    NonzeroAverage(f64),

    #[error("divisor below floor at mode {k:?}: |divisor| = {divisor:.3e}")]
    NearResonance { k: Vec<i32>, divisor: f64 },

    #[error("point {0:?} lies outside the cone")]
    OutsideCone(Vec<f64>),

    #[error("composition requests degree {requested} but inner leading order allows only {available}")]
    OrderUnderflow { requested: usize, available: usize },

    #[error("term of degree {found} present below requested lowest degree {requested}")]
    OrderViolation { requested: usize, found: usize },

    #[error("operation not supported by backend: {0}")]
    BackendUnsupported(String),

    #[error("cone has no admissible sample points")]
    EmptyCone,

    #[error("non-finite quotient while estimating {0}")]
    NonFiniteQuotient(String),

    #[error("weak contraction fails: a_f = {0:.6e}")]
    WeakContractionFail(f64),

    #[error("trajectory left the cone at t = {t:.6e}")]
    ConeExit { t: f64 },

    #[error("degree condition fails: m + 1 + B_Q/a_p = {0:.6e}")]
    DivergenceRisk(f64),

    #[error("quadrature did not reach tolerance: tail estimate {0:.3e}")]
    QuadratureStall(f64),

    #[error("hypothesis failed: {0}")]
    HypothesisFail(String),

    #[error("d_y g^M lost invertibility (smallest singular value {0:.3e})")]
    SingularGbar(f64),

    #[error("refinement sweep is not contracting (Lipschitz estimate {0:.4})")]
    NonContraction(f64),

    #[error("linear part is not of finite order (checked up to {0})")]
    NotRootOfUnity(usize),

    #[error("collision: pairwise distance {0:.3e}")]
    Collision(f64),

    #[error("potential evaluated outside its analyticity domain: {0}")]
    DomainViolation(String),

    #[error("Newton iteration diverged after {iterations} steps (residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("linear block is not diagonalizable near its zero-mass spectrum; masses too large")]
    MassTooLarge,

    #[error("no admissible ell: gamma_2 = {0:.6e}")]
    NoValidEll(f64),

    #[error("integrator step size underflow at t = {0:.6e}")]
    StepSizeUnderflow(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, ParabolicError>;
