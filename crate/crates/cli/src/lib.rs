pub mod config;
pub mod experiments;
pub mod output;
pub mod suite;

pub use config::{Config, ConfigError};
pub use experiments::Outcome;

/// Process exit status for an error: 2 for configuration problems, 3 for numerical aborts.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use she_martin::Error as E;
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(
            E::InvalidArgument(_)
            | E::Capacity { .. }
            | E::Graph(_)
            | E::NonIsomorphicSwap(..)
            | E::Dimension { .. }
            | E::NotPsd { .. }
            | E::NotInvariant(..)
            | E::Diverges
            | E::StrongDisorder(_)
            | E::Stability(_)
            | E::NotPositive(_)
            | E::NonlinearOracle
            | E::BoundaryMismatch
            | E::Lipschitz(..),
        ) => 2,
        Some(_) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 3,
    }
}
