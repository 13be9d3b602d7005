//! Estimation of a non-homogeneous hidden Markov model for longitudinal
//! Gaussian responses subject to monotone, possibly non-ignorable dropout.
//!
//! The longitudinal response of each subject is driven by a hidden Markov
//! chain with `G` ordered states, the missingness indicators by a
//! time-constant class `U` with `K` levels, and the two are linked through an
//! upper-level class `V` with `H` levels. `H = 1` gives the ignorable model.
//!
//! Estimation is by EM with scaled forward/backward recursions, multiple
//! starts, sandwich standard errors and BIC-based selection over `(G, K, H)`.

pub mod em;
pub mod error;
pub mod inference;
pub mod io;
pub mod latent;
pub mod likelihood;
pub mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod selection;
pub mod simulate;

#[cfg(test)]
mod testutil;

pub use em::{fit, fit_with, FitOptions, FitResult, FitTarget, Posteriors};
pub use error::{Error, Result};
pub use inference::{sandwich_covariance, CovarianceReport};
pub use latent::{build_chain_law, ChainLaw, InitialLogits, TransitionLogits};
pub use model::{validate_panel, ConvergenceNorm, EmControls, ModelSpec, PanelData, SubjectRecord};
pub use params::{count_free_parameters, ParameterSet};
