//! Robust covariance for the quasi-likelihood estimator.
//!
//! The limiting covariance is the sandwich `Γ⁻¹ΥΓ⁻¹` where `Γ` is the
//! expected negative Hessian per observation and `Υ` the score variance per
//! observation. Both are assembled from the per-group moment identity
//! `∂lnL_r/∂δ = −φ(m_r, D_r)·χ_r`, which reduces them to sums over
//! `(size, category)` cells of `φ·Ψ̄·φ′` with `Ψ̄` the per-observation moment
//! covariance. Under Gaussian errors `Ψ̄` collapses to its Gaussian form and
//! `Υ = Γ` (the information matrix equality); any departure enters only
//! through the third and fourth error moments, which are estimated from
//! residuals.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimators::Estimate;
use crate::likelihood::{optimal_weight_phi, Delta};
use crate::model::{Dataset, GroupData};

/// Group-level residual decomposition.
#[derive(Debug, Clone)]
pub struct GroupResiduals {
    /// Group mean of the fitted disturbances `û_ir`.
    pub ubar: f64,
    /// Within deviations `û_ir − ū̂_r`.
    pub udot: DVector<f64>,
}

/// Fitted disturbances `û_ir = y_ir − λ̂·lom(y)_ir − z_ir β̂`, split into the
/// group mean and within deviations.
pub fn residuals(d: &Dataset, delta: &Delta) -> Result<Vec<GroupResiduals>> {
    delta.theta.validate()?;
    if delta.beta.len() != d.k_z() {
        return Err(Error::Dimension(format!(
            "beta length {} vs {} regressors",
            delta.beta.len(),
            d.k_z()
        )));
    }
    let lambda = delta.theta.lambda;
    let mut out = Vec::with_capacity(d.n_groups());
    for g in d.groups() {
        out.push(group_residuals(g, lambda, &delta.beta));
    }
    Ok(out)
}

fn group_residuals(g: &GroupData, lambda: f64, beta: &DVector<f64>) -> GroupResiduals {
    let m = g.m();
    let mf = m as f64;
    let ysum = g.y.sum();
    let zb = &g.z * beta;
    let u = DVector::from_fn(m, |i, _| {
        let lom = (ysum - g.y[i]) / (mf - 1.0);
        g.y[i] - lambda * lom - zb[i]
    });
    let ubar = u.sum() / mf;
    GroupResiduals {
        ubar,
        udot: u.map(|v| v - ubar),
    }
}

/// Estimated third and fourth moments of the error components.
#[derive(Debug, Clone)]
pub struct HigherMoments {
    pub mu3_alpha: f64,
    pub mu4_alpha: f64,
    /// Per category, 0-indexed by `D − 1`.
    pub mu3_eps: Vec<f64>,
    pub mu4_eps: Vec<f64>,
}

impl HigherMoments {
    /// The moments implied by Gaussian errors at the given variances.
    pub fn gaussian(theta: &crate::likelihood::Theta) -> Self {
        Self {
            mu3_alpha: 0.0,
            mu4_alpha: 3.0 * theta.sigma_alpha2 * theta.sigma_alpha2,
            mu3_eps: theta.sigma_eps2.iter().map(|_| 0.0).collect(),
            mu4_eps: theta.sigma_eps2.iter().map(|&s| 3.0 * s * s).collect(),
        }
    }
}

/// Moment estimators built from per-group residual statistics; the group
/// functions are unbiased for the component moments and are averaged over
/// all groups (α) or per category (ε). Estimates can legitimately come out
/// negative in small samples and are reported as-is.
pub fn estimate_moments34(d: &Dataset, delta: &Delta) -> Result<HigherMoments> {
    let res = residuals(d, delta)?;
    let j_cats = d.j_categories();
    let mut sum3_eps = vec![0.0; j_cats];
    let mut sum4_eps = vec![0.0; j_cats];
    let mut count = vec![0usize; j_cats];
    let mut sum3_alpha = 0.0;
    let mut sum4_alpha = 0.0;

    for (g, r) in d.groups().iter().zip(&res) {
        let m = g.m();
        let mf = m as f64;
        let j = g.category - 1;
        let sig2 = delta.theta.sigma_eps2[j];
        let sig4 = sig2 * sig2;

        let f3_eps = if m >= 3 {
            let mean3 = r.udot.iter().map(|u| u.powi(3)).sum::<f64>() / mf;
            mean3 / (1.0 - 3.0 / mf + 2.0 / (mf * mf))
        } else {
            let mean2b = r.udot.iter().map(|u| u * u * r.ubar).sum::<f64>() / mf;
            mean2b / (1.0 / mf - 1.0 / (mf * mf))
        };
        let mean4 = r.udot.iter().map(|u| u.powi(4)).sum::<f64>() / mf;
        let denom4 = mf.powi(3) - 4.0 * mf * mf + 6.0 * mf - 3.0;
        let f4_eps = (mf.powi(3) / denom4)
            * (mean4 - 3.0 * (mf - 1.0) * (2.0 * mf - 3.0) / mf.powi(3) * sig4);

        let f3_alpha = r.ubar.powi(3) - f3_eps / (mf * mf);
        let f4_alpha = r.ubar.powi(4)
            - f4_eps / mf.powi(3)
            - 3.0 * (mf - 1.0) / mf.powi(3) * sig4
            - 6.0 / mf * delta.theta.sigma_alpha2 * sig2;

        sum3_eps[j] += f3_eps;
        sum4_eps[j] += f4_eps;
        count[j] += 1;
        sum3_alpha += f3_alpha;
        sum4_alpha += f4_alpha;
    }

    let r_total = d.n_groups() as f64;
    Ok(HigherMoments {
        mu3_alpha: sum3_alpha / r_total,
        mu4_alpha: sum4_alpha / r_total,
        mu3_eps: sum3_eps
            .iter()
            .zip(&count)
            .map(|(s, &c)| s / c as f64)
            .collect(),
        mu4_eps: sum4_eps
            .iter()
            .zip(&count)
            .map(|(s, &c)| s / c as f64)
            .collect(),
    })
}

/// Sample cross products of one `(m, j)` cell, normalized by `N`.
struct CellSample {
    m: usize,
    /// `R_{m,j}/N`
    share: f64,
    kappa_w: DMatrix<f64>,
    kappa_b: DMatrix<f64>,
    zbar: DVector<f64>,
}

/// Per-observation covariance of the stacked cell moments `(χʷ, χᵇ, χᶻʷ, χᶻᵇ)`
/// for one `(m, j)` cell, given component moments.
fn psi_bar(
    cell: &CellSample,
    sig2: f64,
    sigma_alpha2: f64,
    hm: &HigherMoments,
    cat: usize,
) -> DMatrix<f64> {
    let CellSample {
        m,
        share,
        kappa_w,
        kappa_b,
        zbar,
    } = cell;
    let (share, k) = (*share, zbar.len());
    let mf = *m as f64;
    let sig4 = sig2 * sig2;
    let psi_b = sigma_alpha2 + sig2 / mf;
    let ex_kurt_eps = hm.mu4_eps[cat] - 3.0 * sig4;
    let ex_kurt_alpha = hm.mu4_alpha - 3.0 * sigma_alpha2 * sigma_alpha2;
    let mu3e = hm.mu3_eps[cat];

    let mut psi = DMatrix::zeros(2 + 2 * k, 2 + 2 * k);
    psi[(0, 0)] = share * (2.0 * (mf - 1.0) * sig4 + ex_kurt_eps * (mf - 1.0) * (mf - 1.0) / mf);
    psi[(0, 1)] = share * ex_kurt_eps * (mf - 1.0) / (mf * mf);
    psi[(1, 0)] = psi[(0, 1)];
    psi[(1, 1)] = share * (2.0 * psi_b * psi_b + ex_kurt_alpha + ex_kurt_eps / mf.powi(3));
    for i in 0..k {
        // cov(χᶻᵇ, χʷ) and cov(χᶻᵇ, χᵇ); the χᶻʷ rows are zero
        let zb_w = (mf - 1.0) / mf * mu3e * zbar[i];
        let zb_b = (hm.mu3_alpha + mu3e / (mf * mf)) * zbar[i];
        psi[(2 + k + i, 0)] = zb_w;
        psi[(0, 2 + k + i)] = zb_w;
        psi[(2 + k + i, 1)] = zb_b;
        psi[(1, 2 + k + i)] = zb_b;
        for l in 0..k {
            psi[(2 + i, 2 + l)] = sig2 * kappa_w[(i, l)];
            psi[(2 + k + i, 2 + k + l)] = psi_b * kappa_b[(i, l)] / mf;
        }
    }
    psi
}

fn phi_psi_phi(d: &Dataset, delta: &Delta, hm: &HigherMoments) -> Result<DMatrix<f64>> {
    delta.theta.validate()?;
    if delta.theta.sigma_eps2.len() != d.j_categories() || delta.beta.len() != d.k_z() {
        return Err(Error::Dimension(
            "parameter dimensions do not match the dataset".into(),
        ));
    }
    let n = d.n_obs() as f64;
    let dim = 2 + d.j_categories() + d.k_z();
    let mut acc = DMatrix::zeros(dim, dim);
    for cell in d.cells() {
        let sample = CellSample {
            m: cell.m,
            share: cell.count as f64 / n,
            kappa_w: &cell.szz_w / n,
            kappa_b: &cell.smzz / n,
            zbar: &cell.szbar / n,
        };
        let psi = psi_bar(
            &sample,
            delta.theta.sigma_eps2[cell.cat],
            delta.theta.sigma_alpha2,
            hm,
            cell.cat,
        );
        let phi = optimal_weight_phi(cell.m, cell.cat + 1, delta);
        acc += &phi * psi * phi.transpose();
    }
    Ok(acc)
}

/// Expected-information estimate `Γ̂ = Σ φ Ψ̄_G φ′` with sample shares and
/// cross-products plugged in; equals the Gaussian-moment case of `Υ̂`.
pub fn gamma_hat(d: &Dataset, delta: &Delta) -> Result<DMatrix<f64>> {
    phi_psi_phi(d, delta, &HigherMoments::gaussian(&delta.theta))
}

/// Score-variance estimate `Υ̂ = Σ φ Ψ̄ φ′` with estimated third and fourth
/// moments.
pub fn upsilon_hat(d: &Dataset, delta: &Delta, hm: &HigherMoments) -> Result<DMatrix<f64>> {
    phi_psi_phi(d, delta, hm)
}

/// The assembled sandwich and its two factors.
#[derive(Debug, Clone)]
pub struct VcovResult {
    pub gamma_hat: DMatrix<f64>,
    pub upsilon_hat: DMatrix<f64>,
    /// `Γ̂⁻¹ Υ̂ Γ̂⁻¹ / N`.
    pub sandwich: DMatrix<f64>,
    /// Categories (1-based) whose estimated moments violate the strict
    /// inequality `μ⁽⁴⁾ − σ⁴ > (μ⁽³⁾)²/σ²` needed for a positive definite
    /// score variance.
    pub moment_condition_violations: Vec<usize>,
}

/// Sandwich covariance of the fitted parameter vector. Errors if `Γ̂` is not
/// positive definite or the resulting diagonal is not strictly positive.
pub fn sandwich_vcov(d: &Dataset, delta: &Delta) -> Result<VcovResult> {
    let hm = estimate_moments34(d, delta)?;
    let gamma = gamma_hat(d, delta)?;
    let upsilon = upsilon_hat(d, delta, &hm)?;

    let chol = gamma.clone().cholesky().ok_or(Error::SingularInformation)?;
    let gamma_inv = chol.inverse();
    let mut sandwich = (&gamma_inv * &upsilon * &gamma_inv) / d.n_obs() as f64;
    // force exact symmetry
    let dim = sandwich.nrows();
    for i in 0..dim {
        for j in (i + 1)..dim {
            let avg = 0.5 * (sandwich[(i, j)] + sandwich[(j, i)]);
            sandwich[(i, j)] = avg;
            sandwich[(j, i)] = avg;
        }
    }
    for i in 0..dim {
        let diag = sandwich[(i, i)];
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::SandwichDiagonal {
                index: i,
                value: sandwich[(i, i)],
            });
        }
    }

    let violations = lemma2_violations(&hm, &delta.theta);
    Ok(VcovResult {
        gamma_hat: gamma,
        upsilon_hat: upsilon,
        sandwich,
        moment_condition_violations: violations,
    })
}

/// Categories whose estimated moments fail the strict positive-definiteness
/// condition for the score variance.
pub fn lemma2_violations(hm: &HigherMoments, theta: &crate::likelihood::Theta) -> Vec<usize> {
    let mut out = Vec::new();
    for (j, &sig2) in theta.sigma_eps2.iter().enumerate() {
        let lhs = hm.mu4_eps[j] - sig2 * sig2;
        let rhs = hm.mu3_eps[j] * hm.mu3_eps[j] / sig2;
        if lhs <= rhs {
            out.push(j + 1);
        }
    }
    out
}

/// Single-coordinate Wald test result.
#[derive(Debug, Clone, Copy)]
pub struct WaldTest {
    pub stat: f64,
    pub pvalue: f64,
    pub reject05: bool,
}

/// Wald test of `H₀: δ_i = null_value` using the estimate's covariance.
pub fn wald_test(e: &Estimate, index: usize, null_value: f64) -> Result<WaldTest> {
    if index >= e.values.len() {
        return Err(Error::Dimension(format!(
            "coordinate {index} out of range for {} parameters",
            e.values.len()
        )));
    }
    let var = e.vcov[(index, index)];
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::DegenerateTest(format!(
            "variance of coordinate {index} is {var}"
        )));
    }
    let stat = (e.values[index] - null_value).powi(2) / var;
    let chi2 = ChiSquared::new(1.0).expect("chi-squared with 1 dof");
    let pvalue = 1.0 - chi2.cdf(stat);
    Ok(WaldTest {
        stat,
        pvalue,
        reject05: pvalue < 0.05,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::Theta;
    use nalgebra::dvector;

    fn delta_for(d: &Dataset, lambda: f64, sa2: f64, se2: Vec<f64>, beta: &[f64]) -> Delta {
        assert_eq!(beta.len(), d.k_z());
        Delta::new(
            Theta::new(lambda, sa2, se2),
            DVector::from_column_slice(beta),
        )
    }

    #[test]
    fn residuals_pair_arithmetic() {
        // m=2, y=(3,1), λ=0, β=0 → ū=2, ü=(1,−1)
        let recs = vec![
            crate::model::Record {
                group: "g".into(),
                category: 1,
                y: 3.0,
                x1: vec![],
                x2: vec![],
                x3: vec![],
            },
            crate::model::Record {
                group: "g".into(),
                category: 1,
                y: 1.0,
                x1: vec![],
                x2: vec![],
                x3: vec![],
            },
        ];
        let d = crate::model::build_dataset(
            &recs,
            &crate::model::ColumnNames::default(),
            &crate::model::IngestOptions::default(),
        )
        .unwrap();
        let delta = delta_for(&d, 0.0, 0.0, vec![1.0], &[0.0]);
        let res = residuals(&d, &delta).unwrap();
        assert_eq!(res[0].ubar, 2.0);
        let mut dots: Vec<f64> = res[0].udot.iter().copied().collect();
        dots.sort_by(f64::total_cmp);
        assert_eq!(dots, vec![-1.0, 1.0]);
    }

    #[test]
    fn residuals_vanish_at_generating_parameters_with_zero_noise() {
        let design = crate::simulate::Design {
            sigma_alpha2: 0.0,
            sigma_eps2: vec![1e-12],
            ..crate::simulate::Design::baseline(10)
        };
        // draw with essentially zero noise, then evaluate at the truth
        let (d, truth) = crate::simulate::gen_dataset(&design, 5).unwrap();
        let res = residuals(&d, &truth).unwrap();
        for r in &res {
            assert!(r.ubar.abs() < 1e-5);
            assert!(r.udot.amax() < 1e-5);
        }
    }

    #[test]
    fn residuals_match_dense_block_application() {
        let d = crate::simulate::tests::quick_dataset(77, 1);
        let delta = delta_for(&d, 0.3, 0.2, vec![0.9], &[0.5, -0.2, 0.1, 0.3]);
        let res = residuals(&d, &delta).unwrap();
        for (g, r) in d.groups().iter().zip(&res) {
            let a = crate::blockalg::structural_block(g.m(), 0.3).unwrap();
            let u_dense = a.to_dense() * &g.y - &g.z * &delta.beta;
            let ubar = u_dense.sum() / g.m() as f64;
            assert!((ubar - r.ubar).abs() < 1e-10);
            for i in 0..g.m() {
                assert!((u_dense[i] - ubar - r.udot[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn moments34_pair_formula() {
        // m=2 branch: u=(3,1) → f_eps3 = (ü₁²ū/2 + ü₂²ū/2)/(1/2 − 1/4) = 8
        let r = GroupResiduals {
            ubar: 2.0,
            udot: dvector![1.0, -1.0],
        };
        let mf = 2.0f64;
        let mean2b = r.udot.iter().map(|u| u * u * r.ubar).sum::<f64>() / mf;
        let f3 = mean2b / (1.0 / mf - 1.0 / (mf * mf));
        assert_eq!(f3, 8.0);
    }

    #[test]
    fn information_equality_with_gaussian_plugin() {
        let d = crate::simulate::tests::quick_dataset(13, 2);
        let delta = delta_for(&d, 0.4, 0.3, vec![0.7, 1.6], &[1.0, 0.5, -0.5, 0.2]);
        let gamma = gamma_hat(&d, &delta).unwrap();
        let hm = HigherMoments::gaussian(&delta.theta);
        let upsilon = upsilon_hat(&d, &delta, &hm).unwrap();
        assert!((gamma.clone() - upsilon).abs().max() < 1e-10 * gamma.abs().max());
    }

    #[test]
    fn upsilon_stays_symmetric_under_any_moments() {
        let d = crate::simulate::tests::quick_dataset(14, 1);
        let delta = delta_for(&d, 0.2, 0.1, vec![1.1], &[0.3, 0.2, 0.1, -0.1]);
        let mut hm = HigherMoments::gaussian(&delta.theta);
        hm.mu4_eps[0] = 5.0;
        hm.mu3_eps[0] = 0.8;
        hm.mu3_alpha = -0.2;
        let ups = upsilon_hat(&d, &delta, &hm).unwrap();
        assert!((ups.clone() - ups.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn wald_boundary_cases() {
        let e = Estimate {
            names: vec!["lambda".into()],
            values: dvector![0.5],
            vcov: DMatrix::from_element(1, 1, 0.04),
            std_err: dvector![0.2],
            loglik: 0.0,
            converged: true,
            iterations: 1,
            boundary_sigma_alpha: false,
            warnings: vec![],
            delta: None,
        };
        let t = wald_test(&e, 0, 0.5).unwrap();
        assert_eq!(t.stat, 0.0);
        assert!(!t.reject05);

        // stat at the 5% critical value
        let crit: f64 = 3.8414588206941245;
        let e2 = Estimate {
            values: dvector![crit.sqrt() * 0.2 + 0.5],
            ..e.clone()
        };
        let t2 = wald_test(&e2, 0, 0.5).unwrap();
        assert!((t2.stat - crit).abs() < 1e-10);
        assert!((t2.pvalue - 0.05).abs() < 1e-6);

        let e3 = Estimate {
            vcov: DMatrix::from_element(1, 1, 0.0),
            ..e
        };
        assert!(matches!(
            wald_test(&e3, 0, 0.0),
            Err(Error::DegenerateTest(_))
        ));
    }

    #[test]
    fn lemma2_flags_tight_moments() {
        let theta = Theta::new(0.0, 0.1, vec![1.0, 1.0]);
        let hm = HigherMoments {
            mu3_alpha: 0.0,
            mu4_alpha: 0.03,
            mu3_eps: vec![0.0, 2.0],
            mu4_eps: vec![3.0, 2.0],
        };
        // category 2: μ4 − σ⁴ = 1.0 ≤ (μ3)²/σ² = 4.0 → flagged
        assert_eq!(lemma2_violations(&hm, &theta), vec![2]);
    }
}
