//! Significance testing for a smooth bivariate treatment effect in
//! longitudinal functional crossover designs.
//!
//! The pipeline implemented here takes densely observed response curves,
//! recorded repeatedly per subject across the four periods of a two-group
//! crossover design, and tests whether the treatment changes the mean curve
//! anywhere along the period. The steps are:
//!
//! 1. fit an additive mean model (overall mean, treatment, carryover and
//!    baseline covariate effects) with tensor-product penalized splines
//!    ([`smooth`]),
//! 2. estimate the marginal covariance of the demeaned curves and extract
//!    an orthonormal eigenbasis ([`fpca`]),
//! 3. project the curves onto each eigenfunction and cast the projected
//!    scores as a linear mixed model with truncated-polynomial spline bases
//!    ([`lmm`]),
//! 4. whiten by the estimated within-subject covariance and compute
//!    pseudo quasi generalized-F statistics for carryover and treatment
//!    ([`gftest`]),
//! 5. calibrate each statistic against Monte Carlo draws from its
//!    non-standard approximate null distribution ([`nullsim`]),
//! 6. combine the per-direction two-stage decisions with a Bonferroni
//!    correction ([`prolific`]).
//!
//! A data simulator ([`sim`]) reproducing the synthetic crossover design used
//! in the test's size/power studies and an adapted L2-norm competitor test
//! ([`adzc`]) are included so the whole procedure can be benchmarked end to
//! end.

pub mod adzc;
pub mod basis;
pub mod data;
pub mod error;
pub mod fpca;
pub mod gftest;
pub mod lmm;
pub mod nullsim;
pub mod prolific;
pub mod quad;
pub mod rng;
pub mod sim;
pub mod simplex;
pub mod smooth;

pub use error::{Error, Result};
