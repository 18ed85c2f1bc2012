use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph has {vertices} vertices, above the configured maximum of {max}")]
    Capacity { vertices: usize, max: usize },

    #[error("malformed graph: {0}")]
    Graph(String),

    #[error("subtrees rooted at children {0} and {1} are not isomorphic")]
    NonIsomorphicSwap(usize, usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("accuracy bound not met: {what} residual {achieved:.3e} exceeds {bound:.3e}")]
    Accuracy {
        what: &'static str,
        achieved: f64,
        bound: f64,
    },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("covariance not positive semidefinite: min eigenvalue {min_eigenvalue:.3e}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("covariance not invariant under automorphism: R({0},{1}) differs from its image")]
    NotInvariant(usize, usize),

    #[error("Λ diverges: kernel does not vanish at infinity")]
    Diverges,

    #[error("outside weak disorder: (βL_f)²Λ = {0:.6} ≥ 1")]
    StrongDisorder(f64),

    #[error("stability budget violated: dt·(βL_f)²‖R‖ = {0:.4} > 0.1")]
    Stability(f64),

    #[error("non-finite value at step {step}{}", replica.map(|r| format!(" (replica {r})")).unwrap_or_default())]
    NonFinite { step: i64, replica: Option<u64> },

    #[error("not in the positive cone: representation weight {0:.3e} below tolerance")]
    NotPositive(f64),

    #[error("oracle defined for linear f only")]
    NonlinearOracle,

    #[error("Cauchy tolerance unmet: A(K/2, K) = {achieved:.3e} > {target:.3e}; increase K_max")]
    Cauchy { achieved: f64, target: f64 },

    #[error("boundary data of the initial field does not match the pinned boundary data")]
    BoundaryMismatch,

    #[error("Lipschitz constant violated: |f(u)-f(v)| > L|u-v| at u={0}, v={1}")]
    Lipschitz(f64, f64),
}

pub type Result<T> = std::result::Result<T, Error>;
