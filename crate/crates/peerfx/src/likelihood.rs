//! Gaussian likelihood machinery for the grouped peer-effects model.
//!
//! The model for group `r` is `Y_r = λ W_r Y_r + Z_r β + U_r` with
//! `U_r = α_r ι + ε_r`, `W_r = (ιι′ − I)/(m_r − 1)`, `Var(α_r) = σ_α²` and
//! `Var(ε_ir) = σ_ε,D_r²`. Everything here is written in the within/between
//! split: with `p_A = (m−1+λ)/(m−1)` and `s_A = 1−λ`,
//!
//! ```text
//! Ü_r(δ) = p_A·Ÿ_r − Z̈_r β        ū_r(δ) = s_A·ȳ_r − z̄_r β
//! u_r′ Ω_r^{-1} u_r = ‖Ü_r‖²/σ_ε² + m·ū_r²/(σ_ε² + m σ_α²)
//! ```
//!
//! Because the coefficients depend on a group only through its `(m, D)` cell,
//! all quantities are accumulated over the dataset's cell table; evaluation
//! cost is independent of the number of groups.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{within_between, CellStats, Dataset, GroupData};

/// Variance-side parameters `θ = (λ, σ_α², σ_ε,1², …, σ_ε,J²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub lambda: f64,
    pub sigma_alpha2: f64,
    pub sigma_eps2: Vec<f64>,
}

impl Theta {
    pub fn new(lambda: f64, sigma_alpha2: f64, sigma_eps2: Vec<f64>) -> Self {
        Self {
            lambda,
            sigma_alpha2,
            sigma_eps2,
        }
    }

    /// Structural admissibility: `λ ∈ (−1,1)`, `σ_α² ≥ 0`, every `σ_ε,j² > 0`.
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda.abs() >= 1.0 {
            return Err(Error::Domain(format!(
                "lambda must lie in (-1, 1), got {}",
                self.lambda
            )));
        }
        if !self.sigma_alpha2.is_finite() || self.sigma_alpha2 < 0.0 {
            return Err(Error::Domain(format!(
                "sigma_alpha2 must be >= 0, got {}",
                self.sigma_alpha2
            )));
        }
        if self.sigma_eps2.is_empty() {
            return Err(Error::Domain("sigma_eps2 is empty".into()));
        }
        for (j, &s) in self.sigma_eps2.iter().enumerate() {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Domain(format!(
                    "sigma_eps2[{}] must be > 0, got {s}",
                    j + 1
                )));
            }
        }
        Ok(())
    }

    pub fn n_categories(&self) -> usize {
        self.sigma_eps2.len()
    }
}

/// Full parameter vector `δ = (θ, β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub theta: Theta,
    pub beta: DVector<f64>,
}

impl Delta {
    pub fn new(theta: Theta, beta: DVector<f64>) -> Self {
        Self { theta, beta }
    }

    /// Packed length `2 + J + k_z`.
    pub fn packed_len(&self) -> usize {
        2 + self.theta.sigma_eps2.len() + self.beta.len()
    }

    /// Pack as `(λ, σ_α², σ_ε,1²…σ_ε,J², β…)`, the order used by score,
    /// Hessian and covariance matrices.
    pub fn pack(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.packed_len());
        v[0] = self.theta.lambda;
        v[1] = self.theta.sigma_alpha2;
        for (j, &s) in self.theta.sigma_eps2.iter().enumerate() {
            v[2 + j] = s;
        }
        for (c, &b) in self.beta.iter().enumerate() {
            v[2 + self.theta.sigma_eps2.len() + c] = b;
        }
        v
    }

    pub fn unpack(v: &DVector<f64>, j_categories: usize, k_z: usize) -> Self {
        assert_eq!(v.len(), 2 + j_categories + k_z);
        Self {
            theta: Theta {
                lambda: v[0],
                sigma_alpha2: v[1],
                sigma_eps2: (0..j_categories).map(|j| v[2 + j]).collect(),
            },
            beta: DVector::from_fn(k_z, |c, _| v[2 + j_categories + c]),
        }
    }
}

fn check_dims(d: &Dataset, theta: &Theta, beta_len: Option<usize>) -> Result<()> {
    theta.validate()?;
    if theta.sigma_eps2.len() != d.j_categories() {
        return Err(Error::Dimension(format!(
            "theta has {} category variances, dataset has {} categories",
            theta.sigma_eps2.len(),
            d.j_categories()
        )));
    }
    if let Some(k) = beta_len {
        if k != d.k_z() {
            return Err(Error::Dimension(format!(
                "beta has length {k}, dataset has {} regressors",
                d.k_z()
            )));
        }
    }
    Ok(())
}

/// Per-cell coefficient bundle.
struct CellCoef {
    mf: f64,
    count: f64,
    p_a: f64,
    s_a: f64,
    sig2: f64,
    psi: f64,
}

fn coef(cell: &CellStats, theta: &Theta) -> CellCoef {
    let mf = cell.m as f64;
    CellCoef {
        mf,
        count: cell.count as f64,
        p_a: (mf - 1.0 + theta.lambda) / (mf - 1.0),
        s_a: 1.0 - theta.lambda,
        sig2: theta.sigma_eps2[cell.cat],
        psi: theta.sigma_eps2[cell.cat] + mf * theta.sigma_alpha2,
    }
}

/// Residual cross-products for one cell at `δ`.
struct CellResid {
    /// `Σ ‖Ü(δ)‖²`
    uu_w: f64,
    /// `Σ m ū(δ)²`
    m_ubar2: f64,
    /// `Σ Ü(δ)′Ÿ`
    uy_w: f64,
    /// `Σ m ū(δ) ȳ`
    m_ubar_ybar: f64,
}

fn resid(cell: &CellStats, c: &CellCoef, beta: &DVector<f64>) -> CellResid {
    let bq = beta.dot(&cell.szy_w);
    let q_zz = (beta.transpose() * &cell.szz_w * beta)[(0, 0)];
    let b_myz = beta.dot(&cell.smyz);
    let q_mzz = (beta.transpose() * &cell.smzz * beta)[(0, 0)];
    CellResid {
        uu_w: c.p_a * c.p_a * cell.syy_w - 2.0 * c.p_a * bq + q_zz,
        m_ubar2: c.s_a * c.s_a * cell.smy2 - 2.0 * c.s_a * b_myz + q_mzz,
        uy_w: c.p_a * cell.syy_w - bq,
        m_ubar_ybar: c.s_a * cell.smy2 - b_myz,
    }
}

/// Full Gaussian log likelihood at `δ`.
pub fn log_likelihood(d: &Dataset, delta: &Delta) -> Result<f64> {
    check_dims(d, &delta.theta, Some(delta.beta.len()))?;
    let n = d.n_obs() as f64;
    let mut ll = -0.5 * n * (2.0 * std::f64::consts::PI).ln();
    for cell in d.cells() {
        let c = coef(cell, &delta.theta);
        let r = resid(cell, &c, &delta.beta);
        // log|I - λW| - 0.5 log|Ω| per group, counted once per cell member
        ll += c.count
            * ((c.mf - 1.0) * c.p_a.ln() + c.s_a.ln()
                - 0.5 * ((c.mf - 1.0) * c.sig2.ln() + c.psi.ln()));
        ll -= 0.5 * (r.uu_w / c.sig2 + r.m_ubar2 / c.psi);
    }
    Ok(ll)
}

/// Generalized least squares coefficient `β̂(θ) = (Z′Ω⁻¹Z)⁻¹ Z′Ω⁻¹(I−λW)Y`.
pub fn beta_gls(d: &Dataset, theta: &Theta) -> Result<DVector<f64>> {
    check_dims(d, theta, None)?;
    let k = d.k_z();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut b = DVector::<f64>::zeros(k);
    for cell in d.cells() {
        let c = coef(cell, theta);
        a += &cell.szz_w / c.sig2;
        a += &cell.smzz / c.psi;
        b.axpy(c.p_a / c.sig2, &cell.szy_w, 1.0);
        b.axpy(c.s_a / c.psi, &cell.smyz, 1.0);
    }
    solve_spd(&a, &b, "Z'Ω⁻¹Z")
}

const COND_LIMIT: f64 = 1e12;

/// Solve a symmetric positive definite system with a condition-number guard.
fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let eig = a.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.amax();
    let min_ev = eig.eigenvalues.min();
    if min_ev <= 0.0 || !min_ev.is_finite() || max_ev / min_ev > COND_LIMIT {
        let cond = if min_ev > 0.0 {
            max_ev / min_ev
        } else {
            f64::INFINITY
        };
        return Err(Error::Collinearity {
            cond,
            limit: COND_LIMIT,
            detail: format!(" in {what}"),
        });
    }
    // SPD with bounded condition number: reuse the eigendecomposition
    let ut_b = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_fn(b.len(), |i, _| ut_b[i] / eig.eigenvalues[i]);
    Ok(&eig.eigenvectors * scaled)
}

/// Concentrated criterion `Q_N(θ) = ln L_N(θ, β̂(θ)) / N`.
pub fn concentrated_loglik(d: &Dataset, theta: &Theta) -> Result<f64> {
    let beta = beta_gls(d, theta)?;
    let ll = log_likelihood(d, &Delta::new(theta.clone(), beta))?;
    Ok(ll / d.n_obs() as f64)
}

/// Analytic score `∂ ln L_N/∂δ`, stacked as `(λ, σ_α², σ_ε,j², β)`.
pub fn score(d: &Dataset, delta: &Delta) -> Result<DVector<f64>> {
    check_dims(d, &delta.theta, Some(delta.beta.len()))?;
    let j_cats = d.j_categories();
    let k = d.k_z();
    let mut g = DVector::zeros(2 + j_cats + k);
    for cell in d.cells() {
        let c = coef(cell, &delta.theta);
        let r = resid(cell, &c, &delta.beta);
        // λ: -tr[(I-λW)⁻¹W] + U'Ω⁻¹WY
        g[0] += c.count * ((c.mf - 1.0) / (c.mf - 1.0 + delta.theta.lambda) - 1.0 / c.s_a);
        g[0] += -r.uy_w / ((c.mf - 1.0) * c.sig2) + r.m_ubar_ybar / c.psi;
        // σ_α²
        g[1] += -c.count * c.mf / (2.0 * c.psi) + c.mf * r.m_ubar2 / (2.0 * c.psi * c.psi);
        // σ_ε,j²
        let je = 2 + cell.cat;
        g[je] += -0.5 * c.count * ((c.mf - 1.0) / c.sig2 + 1.0 / c.psi);
        g[je] += 0.5 * (r.uu_w / (c.sig2 * c.sig2) + r.m_ubar2 / (c.psi * c.psi));
        // β: Z'Ω⁻¹u
        if k > 0 {
            let zu_w = &cell.szy_w * c.p_a - &cell.szz_w * &delta.beta;
            let zu_b = &cell.smyz * c.s_a - &cell.smzz * &delta.beta;
            for i in 0..k {
                g[2 + j_cats + i] += zu_w[i] / c.sig2 + zu_b[i] / c.psi;
            }
        }
    }
    Ok(g)
}

/// Analytic Hessian `∂² ln L_N/∂δ∂δ′`, same coordinate order as [`score`].
pub fn hessian(d: &Dataset, delta: &Delta) -> Result<DMatrix<f64>> {
    check_dims(d, &delta.theta, Some(delta.beta.len()))?;
    let j_cats = d.j_categories();
    let k = d.k_z();
    let dim = 2 + j_cats + k;
    let mut h = DMatrix::zeros(dim, dim);
    let beta = &delta.beta;
    for cell in d.cells() {
        let c = coef(cell, &delta.theta);
        let r = resid(cell, &c, beta);
        let je = 2 + cell.cat;
        let psi2 = c.psi * c.psi;
        let psi3 = psi2 * c.psi;
        let sig4 = c.sig2 * c.sig2;

        // λλ
        h[(0, 0)] += -c.count
            * ((c.mf - 1.0) / (c.mf - 1.0 + delta.theta.lambda).powi(2) + 1.0 / (c.s_a * c.s_a));
        h[(0, 0)] -= cell.syy_w / ((c.mf - 1.0) * (c.mf - 1.0) * c.sig2) + cell.smy2 / c.psi;
        // λ σ_α²
        h[(0, 1)] += -c.mf * r.m_ubar_ybar / psi2;
        // λ σ_ε,j²
        h[(0, je)] += r.uy_w / ((c.mf - 1.0) * sig4) - r.m_ubar_ybar / psi2;
        // σ_α² σ_α²
        h[(1, 1)] += c.count * c.mf * c.mf / (2.0 * psi2) - c.mf * c.mf * r.m_ubar2 / psi3;
        // σ_α² σ_ε,j²
        h[(1, je)] += c.count * c.mf / (2.0 * psi2) - c.mf * r.m_ubar2 / psi3;
        // σ_ε,j² σ_ε,j²
        h[(je, je)] += 0.5 * c.count * ((c.mf - 1.0) / sig4 + 1.0 / psi2)
            - r.uu_w / (sig4 * c.sig2)
            - r.m_ubar2 / psi3;

        if k > 0 {
            let zu_w = &cell.szy_w * c.p_a - &cell.szz_w * beta;
            let zu_b = &cell.smyz * c.s_a - &cell.smzz * beta;
            for i in 0..k {
                let bi = 2 + j_cats + i;
                // λ β
                h[(0, bi)] += cell.szy_w[i] / ((c.mf - 1.0) * c.sig2) - cell.smyz[i] / c.psi;
                // σ_α² β: the group term is m²·z̄ū/ψ² and zu_b carries one m
                h[(1, bi)] += -c.mf * zu_b[i] / psi2;
                // σ_ε,j² β
                h[(je, bi)] += -zu_w[i] / sig4 - zu_b[i] / psi2;
            }
            // β β′
            for i in 0..k {
                for l in 0..k {
                    h[(2 + j_cats + i, 2 + j_cats + l)] -=
                        cell.szz_w[(i, l)] / c.sig2 + cell.smzz[(i, l)] / c.psi;
                }
            }
        }
    }
    // mirror the upper triangle built above
    for i in 0..dim {
        for l in (i + 1)..dim {
            h[(l, i)] = h[(i, l)];
        }
    }
    Ok(h)
}

/// The four moment blocks of one group, stacked as `(χʷ, χᵇ, χᶻʷ, χᶻᵇ)`.
#[derive(Debug, Clone)]
pub struct MomentVector {
    pub chi_w: f64,
    pub chi_b: f64,
    pub chi_zw: DVector<f64>,
    pub chi_zb: DVector<f64>,
}

impl MomentVector {
    pub fn stack(&self) -> DVector<f64> {
        let k = self.chi_zw.len();
        let mut v = DVector::zeros(2 + 2 * k);
        v[0] = self.chi_w;
        v[1] = self.chi_b;
        for i in 0..k {
            v[2 + i] = self.chi_zw[i];
            v[2 + k + i] = self.chi_zb[i];
        }
        v
    }
}

/// Quadratic and linear moment functions of one group at `δ`:
///
/// ```text
/// χʷ  = ‖p_A Ÿ − Z̈β‖² − (m−1)σ_ε,D²
/// χᵇ  = (s_A ȳ − z̄β)² − σ_α² − σ_ε,D²/m
/// χᶻʷ = Z̈′(p_A Ÿ − Z̈β)       χᶻᵇ = z̄′(s_A ȳ − z̄β)
/// ```
pub fn moment_chi(g: &GroupData, delta: &Delta) -> Result<MomentVector> {
    delta.theta.validate()?;
    if g.category > delta.theta.sigma_eps2.len() {
        return Err(Error::Category(format!(
            "group category {} exceeds parameter count {}",
            g.category,
            delta.theta.sigma_eps2.len()
        )));
    }
    if delta.beta.len() != g.z.ncols() {
        return Err(Error::Dimension(format!(
            "beta length {} vs {} regressors",
            delta.beta.len(),
            g.z.ncols()
        )));
    }
    let m = g.m() as f64;
    let lambda = delta.theta.lambda;
    let p_a = (m - 1.0 + lambda) / (m - 1.0);
    let s_a = 1.0 - lambda;
    let sig2 = delta.theta.sigma_eps2[g.category - 1];
    let wb = within_between(g);
    let u_dot = wb.y_dot.clone() * p_a - &wb.z_dot * &delta.beta;
    let u_bar = s_a * wb.y_bar - wb.z_bar.dot(&delta.beta);
    Ok(MomentVector {
        chi_w: u_dot.dot(&u_dot) - (m - 1.0) * sig2,
        chi_b: u_bar * u_bar - delta.theta.sigma_alpha2 - sig2 / m,
        chi_zw: wb.z_dot.transpose() * u_dot,
        chi_zb: wb.z_bar.clone() * u_bar,
    })
}

/// Optimal weighting matrix `φ(m, D)` mapping the stacked moment vector to
/// (minus) the per-group score: `∂lnL_r/∂δ = −φ(m_r, D_r)·χ_r`. Shape
/// `(2+J+k) × (2+2k)`; `category` is 1-based.
pub fn optimal_weight_phi(m: usize, category: usize, delta: &Delta) -> DMatrix<f64> {
    let j_cats = delta.theta.sigma_eps2.len();
    let k = delta.beta.len();
    assert!(category >= 1 && category <= j_cats, "category out of range");
    let mf = m as f64;
    let lambda = delta.theta.lambda;
    let sig2 = delta.theta.sigma_eps2[category - 1];
    let psi = sig2 + mf * delta.theta.sigma_alpha2;
    let w_w = 1.0 / ((mf - 1.0 + lambda) * sig2);
    let w_b = -mf / ((1.0 - lambda) * psi);

    let mut phi = DMatrix::zeros(2 + j_cats + k, 2 + 2 * k);
    phi[(0, 0)] = w_w;
    phi[(0, 1)] = w_b;
    for c in 0..k {
        phi[(0, 2 + c)] = w_w * delta.beta[c];
        phi[(0, 2 + k + c)] = w_b * delta.beta[c];
    }
    phi[(1, 1)] = -mf * mf / (2.0 * psi * psi);
    for j in 0..j_cats {
        if j + 1 == category {
            phi[(2 + j, 0)] = -1.0 / (2.0 * sig2 * sig2);
            phi[(2 + j, 1)] = -mf / (2.0 * psi * psi);
        }
    }
    for c in 0..k {
        phi[(2 + j_cats + c, 2 + c)] = -1.0 / sig2;
        phi[(2 + j_cats + c, 2 + k + c)] = -mf / psi;
    }
    phi
}

/// The combined moment `ν = χᵇ − χʷ/(m(m−1))` of the simple (covariate-free)
/// model, written directly in the data:
/// `ν = (1−λ)²ȳ² − σ_α² − (m−1+λ)²Ÿ′Ÿ/(m(m−1)³)`.
pub fn moment_nu(g: &GroupData, theta: &Theta) -> f64 {
    let m = g.m() as f64;
    let wb = within_between(g);
    let yy_w = wb.y_dot.dot(&wb.y_dot);
    let s_a = 1.0 - theta.lambda;
    let num = (m - 1.0 + theta.lambda).powi(2);
    s_a * s_a * wb.y_bar * wb.y_bar - theta.sigma_alpha2 - num * yy_w / (m * (m - 1.0).powi(3))
}
