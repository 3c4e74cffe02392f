//! Direct data-driven predictive control for stochastic LTI systems.
//!
//! The crate implements the final-control-error (FCE) controller — a
//! receding-horizon scheme that minimizes the conditional expectation of the
//! finite-horizon tracking cost given the training data — together with the
//! subspace competitors it is usually compared against (DeePC with a
//! consistency regularizer, the γ-DDPC family, a tuning-free variant with a
//! closed-form regularization weight) and a true-model MPC oracle baseline.
//!
//! The pipeline is:
//!
//! 1. [`hankel`]: ingest an open-loop I/O log ([`hankel::Dataset`]) and slice
//!    it into scaled block-Hankel matrices ([`hankel::partition`]).
//! 2. [`arx`]: fit the truncated one-step ARX predictor by least squares
//!    (optionally with a Gaussian prior), estimate the innovation variance,
//!    and pick the truncation order by AIC.
//! 3. [`predictor`]: assemble the multi-step Toeplitz predictor forms and the
//!    regressor map that makes the predicted outputs affine in the future
//!    inputs.
//! 4. [`fce`] + [`qp`]: build the FCE quadratic objective (certainty
//!    equivalence cost plus a posterior-uncertainty regularizer) and solve it
//!    under optional box constraints.
//! 5. [`subspace`]: LQ decomposition of the stacked Hankel data and the
//!    γ-DDPC / DeePC solvers, plus the VARX-bank utilities that tie the LQ
//!    blocks back to predictor coefficients.
//! 6. [`sim`] + [`control`]: innovation-form plant simulation, excitation and
//!    reference generation, and the receding-horizon closed loop over the
//!    [`control::ControlLaw`] trait.
//! 7. [`bench`]: the seeded Monte-Carlo harness that tunes the competitor
//!    schemes with a closed-loop oracle grid search and aggregates paired
//!    performance statistics.
//!
//! All randomness is driven by explicit `u64` seeds through a counter-based
//! generator, so every artifact (datasets, closed-loop logs, benchmark
//! reports) is a pure function of its inputs.

pub mod arx;
pub mod bench;
pub mod control;
pub mod error;
pub mod fce;
pub mod hankel;
pub mod predictor;
pub mod qp;
pub mod sim;
pub mod subspace;

pub use error::{Error, Result};
