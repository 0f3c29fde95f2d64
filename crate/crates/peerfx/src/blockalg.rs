//! Closed-form algebra for group-level matrices of the form `p·I* + s·J*`.
//!
//! `J*_m = ιι′/m` projects a length-`m` vector onto its group mean and
//! `I*_m = I_m − J*_m` onto within-group deviations. The two projectors are
//! symmetric, idempotent and orthogonal, so the family `p·I* + s·J*` is closed
//! under sums, products and inverses, with
//!
//! ```text
//! (p I* + s J*)(p̊ I* + s̊ J*) = p p̊ I* + s s̊ J*
//! (p I* + s J*)^{-1}          = (1/p) I* + (1/s) J*
//! |p I* + s J*|               = p^{m-1} s
//! ```
//!
//! Every matrix appearing in the grouped likelihood (the interaction matrix
//! `I − λW`, its inverse, the error covariance and its inverse, and the weight
//! matrix `W` itself) lives in this family, so the estimation path only ever
//! manipulates `(m, p, s)` triples. Dense `m×m` materialization exists solely
//! for test oracles and is capped at `m ≤ 12`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Coefficient below which a block is treated as singular.
const SINGULAR_TOL: f64 = 1e-300;

/// An `m×m` matrix `p·I*_m + s·J*_m` stored by its two spectral coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupBlock {
    m: usize,
    p: f64,
    s: f64,
}

impl GroupBlock {
    pub fn new(m: usize, p: f64, s: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Domain(format!("group size must be >= 2, got {m}")));
        }
        Ok(Self { m, p, s })
    }

    /// The identity matrix `I_m = 1·I* + 1·J*`.
    pub fn identity(m: usize) -> Result<Self> {
        Self::new(m, 1.0, 1.0)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Within (deviation-space) coefficient.
    pub fn p(&self) -> f64 {
        self.p
    }

    /// Between (mean-space) coefficient.
    pub fn s(&self) -> f64 {
        self.s
    }

    /// Matrix product; coefficients multiply slot-wise and the product commutes.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.m != other.m {
            return Err(Error::Dimension(format!(
                "block sizes differ: {} vs {}",
                self.m, other.m
            )));
        }
        Ok(Self {
            m: self.m,
            p: self.p * other.p,
            s: self.s * other.s,
        })
    }

    /// Inverse block `(1/p)·I* + (1/s)·J*`.
    pub fn inv(&self) -> Result<Self> {
        if self.p.abs() < SINGULAR_TOL || self.s.abs() < SINGULAR_TOL {
            return Err(Error::SingularBlock(format!(
                "cannot invert block with p={:.3e}, s={:.3e}",
                self.p, self.s
            )));
        }
        Ok(Self {
            m: self.m,
            p: 1.0 / self.p,
            s: 1.0 / self.s,
        })
    }

    /// Log determinant `(m−1)·ln p + ln s`; requires both coefficients positive.
    pub fn logdet(&self) -> Result<f64> {
        if self.p <= 0.0 || self.s <= 0.0 {
            return Err(Error::Domain(format!(
                "logdet needs positive coefficients, got p={:.3e}, s={:.3e}",
                self.p, self.s
            )));
        }
        Ok((self.m as f64 - 1.0) * self.p.ln() + self.s.ln())
    }

    /// Trace `(m−1)·p + s`.
    pub fn trace(&self) -> f64 {
        (self.m as f64 - 1.0) * self.p + self.s
    }

    /// Quadratic form `v′(p I* + s J*)w = p⟨v̈,ẅ⟩ + s·m·v̄·w̄`.
    pub fn quadform(&self, v: &[f64], w: &[f64]) -> Result<f64> {
        if v.len() != self.m || w.len() != self.m {
            return Err(Error::Dimension(format!(
                "quadform on block of size {} with vectors of length {} and {}",
                self.m,
                v.len(),
                w.len()
            )));
        }
        let mf = self.m as f64;
        let vbar = v.iter().sum::<f64>() / mf;
        let wbar = w.iter().sum::<f64>() / mf;
        let within: f64 = v.iter().zip(w).map(|(a, b)| (a - vbar) * (b - wbar)).sum();
        Ok(self.p * within + self.s * mf * vbar * wbar)
    }

    /// Dense materialization for test oracles. Refuses blocks beyond `m = 12`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        assert!(
            self.m <= 12,
            "dense materialization is an oracle facility, capped at m <= 12"
        );
        let mf = self.m as f64;
        DMatrix::from_fn(self.m, self.m, |i, j| {
            let jstar = 1.0 / mf;
            let istar = if i == j { 1.0 - jstar } else { -jstar };
            self.p * istar + self.s * jstar
        })
    }
}

/// The structural block `I_m − λW_m = ((m−1+λ)/(m−1))·I* + (1−λ)·J*`, where
/// `W_m = (ιι′ − I)/(m−1)` is the equal-weight interaction matrix.
pub fn structural_block(m: usize, lambda: f64) -> Result<GroupBlock> {
    if !(-1.0..1.0).contains(&lambda) {
        return Err(Error::Domain(format!(
            "lambda must lie in (-1, 1), got {lambda}"
        )));
    }
    let mf = m as f64;
    GroupBlock::new(m, (mf - 1.0 + lambda) / (mf - 1.0), 1.0 - lambda)
}

/// The group error covariance `σ_ε²·I + σ_α²·ιι′ = σ_ε²·I* + (σ_ε² + m·σ_α²)·J*`.
pub fn omega_block(m: usize, sigma_eps2: f64, sigma_alpha2: f64) -> Result<GroupBlock> {
    if sigma_eps2 <= 0.0 {
        return Err(Error::Domain(format!(
            "sigma_eps2 must be positive, got {sigma_eps2}"
        )));
    }
    if sigma_alpha2 < 0.0 {
        return Err(Error::Domain(format!(
            "sigma_alpha2 must be non-negative, got {sigma_alpha2}"
        )));
    }
    GroupBlock::new(m, sigma_eps2, sigma_eps2 + m as f64 * sigma_alpha2)
}
