//! Estimation of linear-in-means peer effects models with random group
//! effects.
//!
//! The model: individual `i` in group `r` has outcome
//!
//! ```text
//! y_ir = β₁ + λ·lom(y)_ir + x1_ir β₂ + lom(x2)_ir β₃ + x3_r β₄ + α_r + ε_ir
//! ```
//!
//! where `lom(·)` is the leave-out mean over the other group members, `α_r`
//! is a mean-zero random group effect with variance `σ_α²`, and `ε_ir` is an
//! idiosyncratic error whose variance `σ_ε,D_r²` may differ across a finite
//! set of group categories. The crate provides
//!
//! - [`estimators::fit_qmle`]: the Gaussian quasi-maximum-likelihood
//!   estimator of all parameters, with sandwich standard errors that stay
//!   valid under non-Gaussian errors ([`inference`]);
//! - [`estimators::fit_cmle`]: the conditional (within-group) likelihood
//!   estimator, robust to fixed group effects but homoscedastic-only;
//! - [`estimators::fit_graham_cv`]: conditional-variance Wald estimators for
//!   the covariate-free two-category model;
//! - [`simulate`] and [`mc`]: a reproducible data generator and Monte Carlo
//!   harness for comparing the estimators.
//!
//! Parameters are identified when either some category contains two group
//! sizes, or two categories with different error variances share a size;
//! [`model::check_identification`] reports which holds for a dataset.
//!
//! All likelihood algebra runs on the two spectral coefficients of
//! group-level matrices `p·I* + s·J*` ([`blockalg`]); nothing larger than a
//! `k_z × k_z` system is ever factorized.

pub mod blockalg;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod likelihood;
pub mod mc;
pub mod model;
mod optim;
pub mod simulate;

pub use error::{Error, Result};
