//! State estimation for power systems observed by a sparse set of PMUs.
//!
//! The pipeline synthesizes training data with an AC power flow, trains a
//! feed-forward MMSE estimator on PMU features, screens incoming measurements
//! for bad data, and fine-tunes the estimator after topology changes. A
//! Gaussian conditional-mean oracle and a PMU-only linear estimator serve as
//! references.

pub mod bddc;
pub mod error;
pub mod eval;
pub mod gauss;
pub mod linalg;
pub mod lse;
pub mod mlp;
pub mod netmodel;
pub mod powerflow;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is on.
/// Output order always follows the index.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
