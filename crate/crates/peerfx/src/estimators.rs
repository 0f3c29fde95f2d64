//! Model fitting: the quasi-maximum-likelihood estimator, the conditional
//! (within-group) maximum likelihood estimator, and the conditional-variance
//! Wald estimators for the covariate-free model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::inference;
use crate::likelihood::{beta_gls, log_likelihood, score, Delta, Theta};
use crate::model::{check_identification, Dataset};
use crate::optim;

/// Admissible parameter box.
#[derive(Debug, Clone)]
pub struct ThetaBounds {
    pub lambda: (f64, f64),
    pub sigma_alpha2_max: f64,
    pub sigma_eps2: (f64, f64),
}

impl Default for ThetaBounds {
    fn default() -> Self {
        Self {
            lambda: (-0.99, 0.99),
            sigma_alpha2_max: 1e6,
            sigma_eps2: (1e-8, 1e6),
        }
    }
}

/// Options controlling the fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Iteration cap per optimizer start.
    pub max_iter: usize,
    /// Sup-norm tolerance on the score at the reported optimum.
    pub grad_tol: f64,
    /// Number of optimizer starts (first is data-driven, the rest random).
    pub multistart: usize,
    pub bounds: ThetaBounds,
    /// Seed for the random restarts.
    pub seed: u64,
    /// Skip the identification pre-check.
    pub allow_unidentified: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            grad_tol: 1e-4,
            multistart: 5,
            bounds: ThetaBounds::default(),
            seed: 0x7065_6572,
            allow_unidentified: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.grad_tol <= 0.0 || !self.grad_tol.is_finite() {
            return Err(Error::Domain("grad_tol must be positive".into()));
        }
        if self.multistart == 0 {
            return Err(Error::Domain("multistart must be >= 1".into()));
        }
        let (lo, hi) = self.bounds.lambda;
        if !(-1.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Domain(format!(
                "lambda bounds must satisfy -1 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        let (elo, ehi) = self.bounds.sigma_eps2;
        if !(0.0 < elo && elo < ehi) {
            return Err(Error::Domain(format!(
                "sigma_eps2 bounds must satisfy 0 < lo < hi, got ({elo}, {ehi})"
            )));
        }
        if self.bounds.sigma_alpha2_max <= 0.0 || self.bounds.sigma_alpha2_max.is_nan() {
            return Err(Error::Domain("sigma_alpha2_max must be positive".into()));
        }
        Ok(())
    }
}

/// A fitted model: named parameters, covariance and diagnostics.
#[derive(Debug, Clone)]
pub struct Estimate {
    /// Parameter names aligned with `values`, `std_err` and `vcov`.
    pub names: Vec<String>,
    pub values: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub std_err: DVector<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// The group-effect variance was driven to its zero boundary.
    pub boundary_sigma_alpha: bool,
    pub warnings: Vec<String>,
    /// Full parameter vector in model order; present for the QMLE.
    pub delta: Option<Delta>,
}

impl Estimate {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value_of(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.values[i])
    }
}

const BOUNDARY_SIGMA_ALPHA: f64 = 1e-10;

/// Smooth unconstrained reparameterization of θ. λ maps through a scaled
/// tanh into its box, σ_α² through softplus (with an exact-zero pinned
/// variant used by the boundary polish), and each σ_ε,j² through exp clamped
/// into its bounds.
struct Reparam {
    lam_mid: f64,
    lam_half: f64,
    pin_alpha: bool,
    eps_lo: f64,
    eps_hi: f64,
    j: usize,
}

fn softplus(b: f64) -> f64 {
    if b > 30.0 {
        b
    } else {
        b.exp().ln_1p()
    }
}

fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().max(1e-300).ln()
    }
}

impl Reparam {
    fn new(bounds: &ThetaBounds, j: usize, pin_alpha: bool) -> Self {
        Self {
            lam_mid: 0.5 * (bounds.lambda.0 + bounds.lambda.1),
            lam_half: 0.5 * (bounds.lambda.1 - bounds.lambda.0),
            pin_alpha,
            eps_lo: bounds.sigma_eps2.0,
            eps_hi: bounds.sigma_eps2.1,
            j,
        }
    }

    fn dim(&self) -> usize {
        1 + usize::from(!self.pin_alpha) + self.j
    }

    fn theta(&self, x: &DVector<f64>) -> Theta {
        let lambda = self.lam_mid + self.lam_half * x[0].tanh();
        let (alpha, off) = if self.pin_alpha {
            (0.0, 1)
        } else {
            (softplus(x[1]), 2)
        };
        let eps = (0..self.j)
            .map(|k| x[off + k].exp().clamp(self.eps_lo, self.eps_hi))
            .collect();
        Theta::new(lambda, alpha, eps)
    }

    /// Chain rule: gradient in x-space from the θ-part of the score.
    fn pullback(&self, x: &DVector<f64>, score_theta: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        let t = x[0].tanh();
        g[0] = score_theta[0] * self.lam_half * (1.0 - t * t);
        let off = if self.pin_alpha {
            1
        } else {
            let sig = 1.0 / (1.0 + (-x[1]).exp());
            g[1] = score_theta[1] * sig;
            2
        };
        for k in 0..self.j {
            let e = x[off + k].exp();
            let deriv = if e <= self.eps_lo || e >= self.eps_hi {
                0.0
            } else {
                e
            };
            g[off + k] = score_theta[2 + k] * deriv;
        }
        g
    }

    fn x_from(&self, theta: &Theta) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        let t = ((theta.lambda - self.lam_mid) / self.lam_half).clamp(-1.0 + 1e-9, 1.0 - 1e-9);
        x[0] = t.atanh();
        let off = if self.pin_alpha {
            1
        } else {
            x[1] = inv_softplus(theta.sigma_alpha2.max(1e-12));
            2
        };
        for k in 0..self.j {
            x[off + k] = theta.sigma_eps2[k].clamp(self.eps_lo, self.eps_hi).ln();
        }
        x
    }
}

/// Data-driven starting point: OLS residual variance decomposition at λ = 0.
fn data_start(d: &Dataset, bounds: &ThetaBounds) -> Result<Theta> {
    let j = d.j_categories();
    let theta_ols = Theta::new(0.0, 0.0, vec![1.0; j]);
    let beta = beta_gls(d, &theta_ols)?;
    let res = inference::residuals(d, &Delta::new(theta_ols, beta))?;

    let mut ssw = vec![0.0; j];
    let mut dof = vec![0.0; j];
    let mut between = 0.0;
    for (g, r) in d.groups().iter().zip(&res) {
        let cat = g.category - 1;
        ssw[cat] += r.udot.dot(&r.udot);
        dof[cat] += g.m() as f64 - 1.0;
        between += r.ubar * r.ubar;
    }
    let eps: Vec<f64> = ssw
        .iter()
        .zip(&dof)
        .map(|(ss, df)| {
            (ss / df.max(1.0)).clamp(bounds.sigma_eps2.0.max(1e-4), bounds.sigma_eps2.1)
        })
        .collect();
    let mean_inv_m =
        d.groups().iter().map(|g| 1.0 / g.m() as f64).sum::<f64>() / d.n_groups() as f64;
    let mean_eps = eps.iter().sum::<f64>() / j as f64;
    let alpha = (between / d.n_groups() as f64 - mean_eps * mean_inv_m)
        .clamp(1e-3, bounds.sigma_alpha2_max);
    let lambda = if bounds.lambda.0 < 0.0 && bounds.lambda.1 > 0.0 {
        0.0
    } else {
        0.5 * (bounds.lambda.0 + bounds.lambda.1)
    };
    Ok(Theta::new(lambda, alpha, eps))
}

fn random_starts(d: &Dataset, opts: &FitOptions, n: usize) -> Vec<Theta> {
    // pooled outcome variance sets the scale of the variance draws
    let nf = d.n_obs() as f64;
    let (mut sum, mut sumsq) = (0.0, 0.0);
    for g in d.groups() {
        sum += g.y.sum();
        sumsq += g.y.dot(&g.y);
    }
    let s2y = ((sumsq - sum * sum / nf) / nf).max(1e-3);

    let j = d.j_categories();
    let b = &opts.bounds;
    let eps_lo = b.sigma_eps2.0.max(0.05 * s2y);
    let eps_hi = b.sigma_eps2.1.min(5.0 * s2y).max(eps_lo * 1.0001);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..n)
        .map(|_| {
            let margin = 0.025 * (b.lambda.1 - b.lambda.0);
            let lambda = rng.gen_range(b.lambda.0 + margin..b.lambda.1 - margin);
            let alpha_hi = s2y.min(b.sigma_alpha2_max).max(2e-4);
            let alpha = rng.gen_range(1e-4..alpha_hi);
            let eps = (0..j)
                .map(|_| (rng.gen_range(eps_lo.ln()..eps_hi.ln())).exp())
                .collect();
            Theta::new(lambda, alpha, eps)
        })
        .collect()
}

/// Sup-norm convergence check on the score; at the σ_α² = 0 boundary the
/// first-order condition becomes one-sided.
fn score_converged(s: &DVector<f64>, boundary: bool, grad_tol: f64) -> bool {
    let mut sup: f64 = 0.0;
    for i in 0..s.len() {
        if boundary && i == 1 {
            continue;
        }
        sup = sup.max(s[i].abs());
    }
    sup < grad_tol && (!boundary || s[1] < grad_tol)
}

fn qmle_param_names(d: &Dataset) -> Vec<String> {
    let mut names = vec!["lambda".to_string(), "sigma_alpha2".to_string()];
    for j in 1..=d.j_categories() {
        names.push(format!("sigma_eps2_{j}"));
    }
    for zn in d.z_names() {
        names.push(format!("beta_{zn}"));
    }
    names
}

fn nan_matrix(dim: usize) -> DMatrix<f64> {
    DMatrix::from_element(dim, dim, f64::NAN)
}

/// Fit the quasi-maximum-likelihood estimator: maximize the concentrated
/// criterion over θ by BFGS on a smooth reparameterization (multistart),
/// polish the σ_α² boundary if it is hit, then recover β by GLS and attach
/// the sandwich covariance.
pub fn fit_qmle(d: &Dataset, opts: &FitOptions) -> Result<Estimate> {
    opts.validate()?;
    if !opts.allow_unidentified {
        let rep = check_identification(d);
        if !rep.identified {
            return Err(Error::Identification(format!(
                "neither identification scenario holds (scenario_a={}, scenario_b={}); pass the override to fit anyway",
                rep.scenario_a, rep.scenario_b
            )));
        }
    }

    let mut starts = vec![data_start(d, &opts.bounds)?];
    starts.extend(random_starts(d, opts, opts.multistart.saturating_sub(1)));

    let inner = optim::BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: (opts.grad_tol * 1e-2).min(1e-6),
    };

    let mut iterations = 0usize;
    let mut any_inner_converged = false;
    let mut best: Option<(f64, Theta)> = None;
    for (k, theta0) in starts.iter().enumerate() {
        let reparam = Reparam::new(&opts.bounds, d.j_categories(), false);
        let out = minimize_objective(d, &reparam, theta0, &inner);
        iterations += out.1;
        any_inner_converged |= out.2;
        if let Some((ll, theta)) = out.0 {
            if best.as_ref().is_none_or(|(b, _)| ll > *b) {
                best = Some((ll, theta));
            }
        } else if k == 0 && best.is_none() && opts.multistart == 1 {
            // objective unusable at the only start: surface the cause
            let _ = beta_gls(d, theta0)?;
        }
    }
    let (mut best_ll, mut theta_hat) =
        best.ok_or_else(|| Error::Domain("likelihood could not be evaluated at any start".into()))?;

    // Boundary polish: the softplus map flattens near zero, so an optimum at
    // σ_α² = 0 leaves the unpinned iterate stranded at a tiny positive value.
    // Whenever the fitted value is small, re-fit with σ_α² pinned to zero and
    // keep whichever attains the higher likelihood.
    let eps_scale = theta_hat.sigma_eps2.iter().sum::<f64>() / theta_hat.sigma_eps2.len() as f64;
    if theta_hat.sigma_alpha2 < 1e-4 * eps_scale.max(1.0) {
        let reparam = Reparam::new(&opts.bounds, d.j_categories(), true);
        let out = minimize_objective(d, &reparam, &theta_hat, &inner);
        iterations += out.1;
        any_inner_converged |= out.2;
        if let Some((ll, theta)) = out.0 {
            if ll >= best_ll {
                best_ll = ll;
                theta_hat = theta;
            }
        }
    }

    let beta = beta_gls(d, &theta_hat)?;
    let delta = Delta::new(theta_hat, beta);
    let s = score(d, &delta)?;
    let boundary = delta.theta.sigma_alpha2 < BOUNDARY_SIGMA_ALPHA;
    let converged = score_converged(&s, boundary, opts.grad_tol);

    let mut warnings = Vec::new();
    if boundary {
        warnings.push(
            "sigma_alpha2 is at its zero boundary; its Wald interval is unreliable there".into(),
        );
    }
    if !any_inner_converged {
        warnings.push("optimizer hit its iteration cap on every start".into());
    }
    let dim = delta.packed_len();
    let (vcov, std_err) = match inference::sandwich_vcov(d, &delta) {
        Ok(v) => {
            for j in &v.moment_condition_violations {
                warnings.push(format!(
                    "category {j}: estimated error moments violate the positive-definiteness condition for the score variance"
                ));
            }
            let se = DVector::from_fn(dim, |i, _| v.sandwich[(i, i)].sqrt());
            (v.sandwich, se)
        }
        Err(e) => {
            warnings.push(format!("covariance unavailable: {e}"));
            (nan_matrix(dim), DVector::from_element(dim, f64::NAN))
        }
    };

    let est = Estimate {
        names: qmle_param_names(d),
        values: delta.pack(),
        vcov,
        std_err,
        loglik: best_ll,
        converged,
        iterations,
        boundary_sigma_alpha: boundary,
        warnings,
        delta: Some(delta),
    };
    if !est.converged {
        return Err(Error::NonConvergence {
            starts: starts.len(),
            best_q: best_ll / d.n_obs() as f64,
            best: Box::new(est),
        });
    }
    Ok(est)
}

/// One BFGS run on the concentrated likelihood; returns the best (lnL, θ)
/// seen, the iteration count, and whether the inner tolerance was reached.
/// The first slot is `None` if the objective was never finite.
fn minimize_objective(
    d: &Dataset,
    reparam: &Reparam,
    theta0: &Theta,
    inner: &optim::BfgsOptions,
) -> (Option<(f64, Theta)>, usize, bool) {
    let x0 = reparam.x_from(theta0);
    let dim = reparam.dim();
    let out = optim::minimize(
        x0,
        |x| {
            let theta = reparam.theta(x);
            let failed = (f64::INFINITY, DVector::zeros(dim));
            let beta = match beta_gls(d, &theta) {
                Ok(b) => b,
                Err(_) => return failed,
            };
            let delta = Delta::new(theta, beta);
            let ll = match log_likelihood(d, &delta) {
                Ok(v) if v.is_finite() => v,
                _ => return failed,
            };
            let sc = match score(d, &delta) {
                Ok(s) => s,
                Err(_) => return failed,
            };
            let score_theta = sc.rows(0, 2 + reparam.j).into_owned();
            (-ll, -reparam.pullback(x, &score_theta))
        },
        inner,
    );
    if out.f.is_finite() {
        (
            Some((-out.f, reparam.theta(&out.x))),
            out.iterations,
            out.converged,
        )
    } else {
        (None, out.iterations, out.converged)
    }
}

/// Greedy rank-revealing column selection on a Gram matrix: incremental
/// Cholesky keeping a column only while its conditional variance stays above
/// `rel_tol` times its marginal variance.
fn select_independent_columns(gram: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let k = gram.nrows();
    let max_diag = (0..k).map(|c| gram[(c, c)]).fold(0.0f64, f64::max);
    if max_diag <= 0.0 {
        return Vec::new();
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut chol: Vec<Vec<f64>> = Vec::new(); // rows of L for the kept set
    for c in 0..k {
        // solve L w = gram[kept, c]
        let mut w = vec![0.0; kept.len()];
        for (i, &ki) in kept.iter().enumerate() {
            let mut s = gram[(ki, c)];
            for l in 0..i {
                s -= chol[i][l] * w[l];
            }
            w[i] = s / chol[i][i];
        }
        let schur = gram[(c, c)] - w.iter().map(|v| v * v).sum::<f64>();
        if schur > rel_tol * max_diag {
            let mut row = w;
            row.push(schur.sqrt());
            chol.push(row);
            kept.push(c);
        }
    }
    kept
}

/// Fit the conditional (within-group) maximum likelihood estimator. Only
/// `(λ, σ_ε², β_w)` are estimated, where `β_w` spans the regressors with
/// within-group variation; the intercept, group-level columns and anything
/// collinear within groups are dropped and reported. The criterion per group
/// is `(m−1)·ln p_A − ((m−1)/2)·ln(2πσ²) − ‖p_A Ÿ − Z̈β‖²/(2σ²)`, maximized
/// by a λ-grid with golden-section refinement after concentrating out β and
/// σ². Standard errors come from the observed information of this Gaussian
/// criterion.
pub fn fit_cmle(d: &Dataset, opts: &FitOptions) -> Result<Estimate> {
    opts.validate()?;
    let k = d.k_z();
    let n = d.n_obs() as f64;
    let r_groups = d.n_groups() as f64;
    let dof = n - r_groups;

    // pool cells over categories: the CMLE is homoscedastic by construction
    let mut zz_full = DMatrix::<f64>::zeros(k, k);
    let mut by_size: std::collections::BTreeMap<usize, (f64, DVector<f64>, f64)> =
        std::collections::BTreeMap::new();
    for cell in d.cells() {
        zz_full += &cell.szz_w;
        let e = by_size
            .entry(cell.m)
            .or_insert_with(|| (0.0, DVector::zeros(k), 0.0));
        e.0 += cell.syy_w;
        e.1 += &cell.szy_w;
        e.2 += cell.count as f64;
    }

    let kept = select_independent_columns(&zz_full, 1e-10);
    if kept.is_empty() && k > 1 {
        return Err(Error::WithinCollinearity);
    }
    let dropped: Vec<String> = (0..k)
        .filter(|c| !kept.contains(c))
        .map(|c| d.z_names()[c].clone())
        .collect();

    let kw = kept.len();
    let zz = DMatrix::from_fn(kw, kw, |i, l| zz_full[(kept[i], kept[l])]);
    let sized: Vec<(f64, f64, DVector<f64>, f64)> = by_size
        .iter()
        .map(|(&m, (syy, szy, cnt))| {
            (
                m as f64,
                *syy,
                DVector::from_fn(kw, |i, _| szy[kept[i]]),
                *cnt,
            )
        })
        .collect();

    let chol = if kw > 0 {
        Some(zz.clone().cholesky().ok_or(Error::WithinCollinearity)?)
    } else {
        None
    };

    // β̂(λ) from the within normal equations, then RSS(λ) = S2 − β̂'rhs
    let solve_beta = |lambda: f64| -> (DVector<f64>, f64) {
        let mut rhs = DVector::zeros(kw);
        let mut s2 = 0.0;
        for (mf, syy, szy, _cnt) in &sized {
            let p_a = (mf - 1.0 + lambda) / (mf - 1.0);
            rhs.axpy(p_a, szy, 1.0);
            s2 += p_a * p_a * syy;
        }
        let beta = match &chol {
            Some(c) => c.solve(&rhs),
            None => DVector::zeros(0),
        };
        let rss = s2 - beta.dot(&rhs);
        (beta, rss)
    };
    let profile = |lambda: f64| -> f64 {
        let (_, rss) = solve_beta(lambda);
        let mut val = -0.5 * dof * rss.max(1e-300).ln();
        for (mf, _, _, cnt) in &sized {
            val += cnt * (mf - 1.0) * ((mf - 1.0 + lambda) / (mf - 1.0)).ln();
        }
        val
    };

    // grid scan for the global maximum of the profile, then refine
    let (lo, hi) = opts.bounds.lambda;
    let grid_n = 397;
    let mut best_i = 0;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..grid_n {
        let lam = lo + (hi - lo) * i as f64 / (grid_n - 1) as f64;
        let v = profile(lam);
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    let step = (hi - lo) / (grid_n - 1) as f64;
    let bracket_lo = (lo + step * (best_i as f64 - 1.0)).max(lo);
    let bracket_hi = (lo + step * (best_i as f64 + 1.0)).min(hi);
    let lambda_hat = optim::golden_section(bracket_lo, bracket_hi, |l| -profile(l), 1e-11);
    let (beta_hat, rss) = solve_beta(lambda_hat);
    let mut warnings = Vec::new();
    if !dropped.is_empty() {
        warnings.push(format!(
            "dropped from the within fit (no within-group variation): {}",
            dropped.join(", ")
        ));
    }
    let sigma2_raw = rss / dof;
    let sigma2 = sigma2_raw.clamp(opts.bounds.sigma_eps2.0, opts.bounds.sigma_eps2.1);
    if sigma2_raw < opts.bounds.sigma_eps2.0 || sigma2_raw > opts.bounds.sigma_eps2.1 {
        warnings.push("sigma_eps2 clamped to its bound".into());
    }
    let at_edge = lambda_hat - lo < 2.0 * step || hi - lambda_hat < 2.0 * step;
    if at_edge {
        warnings.push("lambda is at the edge of its admissible box".into());
    }

    // observed information of the within likelihood at the optimum
    let dim = 2 + kw;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let sig4 = sigma2 * sigma2;
    let mut uy_total = 0.0;
    for (mf, syy, szy, cnt) in &sized {
        let p_a = (mf - 1.0 + lambda_hat) / (mf - 1.0);
        let uy = p_a * syy - beta_hat.dot(szy);
        uy_total += uy / (mf - 1.0);
        h[(0, 0)] += -cnt * (mf - 1.0) / (mf - 1.0 + lambda_hat).powi(2)
            - syy / ((mf - 1.0) * (mf - 1.0) * sigma2);
        h[(0, 1)] += uy / ((mf - 1.0) * sig4);
        for i in 0..kw {
            h[(0, 2 + i)] += szy[i] / ((mf - 1.0) * sigma2);
        }
    }
    h[(1, 1)] = 0.5 * dof / sig4 - rss / (sig4 * sigma2);
    // H_σβ = −Z̈'Ü/σ⁴ vanishes at β̂; keep the exact expression anyway
    let mut zu = DVector::zeros(kw);
    for (mf, _, szy, _) in &sized {
        let p_a = (mf - 1.0 + lambda_hat) / (mf - 1.0);
        zu.axpy(p_a, szy, 1.0);
    }
    zu -= &zz * &beta_hat;
    for i in 0..kw {
        h[(1, 2 + i)] = -zu[i] / sig4;
        for l in 0..kw {
            h[(2 + i, 2 + l)] = -zz[(i, l)] / sigma2;
        }
    }
    for i in 0..dim {
        for l in (i + 1)..dim {
            h[(l, i)] = h[(i, l)];
        }
    }

    // at an interior optimum the profile score must vanish; a fit pinned to
    // the edge of the admissible box is still the constrained argmax
    let score_lambda = {
        let mut s = 0.0;
        for (mf, _, _, cnt) in &sized {
            s += cnt * (mf - 1.0) / (mf - 1.0 + lambda_hat);
        }
        s - uy_total / sigma2
    };
    let converged = at_edge || score_lambda.abs() < opts.grad_tol.max(1e-6 * n);

    let (vcov, std_err) = match (-h.clone()).cholesky() {
        Some(c) => {
            let v = c.inverse();
            let se = DVector::from_fn(dim, |i, _| v[(i, i)].max(0.0).sqrt());
            (v, se)
        }
        None => {
            warnings.push("within information matrix is not positive definite".into());
            (nan_matrix(dim), DVector::from_element(dim, f64::NAN))
        }
    };

    let mut names = vec!["lambda".to_string(), "sigma_eps2_1".to_string()];
    for &c in &kept {
        names.push(format!("beta_{}", d.z_names()[c]));
    }
    let mut values = DVector::zeros(dim);
    values[0] = lambda_hat;
    values[1] = sigma2;
    for i in 0..kw {
        values[2 + i] = beta_hat[i];
    }

    // full within log likelihood at the optimum (with constants)
    let loglik = {
        let mut val = -0.5 * dof * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * rss / sigma2;
        for (mf, _, _, cnt) in &sized {
            val += cnt * (mf - 1.0) * ((mf - 1.0 + lambda_hat) / (mf - 1.0)).ln();
        }
        val
    };

    Ok(Estimate {
        names,
        values,
        vcov,
        std_err,
        loglik,
        converged,
        iterations: grid_n,
        boundary_sigma_alpha: false,
        warnings,
        delta: None,
    })
}

/// Which conditional-variance contrast to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvVariant {
    /// Matches the leave-out-mean model: solves
    /// `(m−1+λ)²/(1−λ)² = Δ var(ȳ) / Δ E[Ÿ′Ÿ/(m(m−1)³)]` per size.
    LeaveOutMean,
    /// Matches the full-mean model: solves `1/(1−λ̃)² = Δ var(ȳ) / Δ E[Ÿ′Ÿ/(m(m−1))]`
    /// pooled over sizes, with `λ̃` constrained below 1.
    FullMean,
}

/// Conditional-variance estimate for the covariate-free two-category model.
#[derive(Debug, Clone, Copy)]
pub struct CvFit {
    pub lambda: f64,
    pub sigma_alpha2: f64,
}

const CV_DENOM_TOL: f64 = 1e-10;

/// Solve `((m_r−1+λ)/(m_s−1+λ))² = ((m_r−1)³/(m_s−1)³)·(varw_s/varw_r)` for
/// the unique root in (−1, 1). `varw_q` is the expected within variance
/// `E[Ÿ_q′Ÿ_q]/(m_q−1)` of a group of size `m_q`.
pub fn solve_within_wald(varw_r: f64, varw_s: f64, m_r: usize, m_s: usize) -> Result<f64> {
    if m_r == m_s {
        return Err(Error::Domain(
            "within contrast needs two distinct sizes".into(),
        ));
    }
    if varw_r <= 0.0 || varw_s <= 0.0 || !varw_r.is_finite() || !varw_s.is_finite() {
        return Err(Error::Domain("within variances must be positive".into()));
    }
    let (mr, ms) = (m_r as f64, m_s as f64);
    let wss_r = varw_r * (mr - 1.0);
    let wss_s = varw_s * (ms - 1.0);
    let target = ((mr - 1.0).powi(3) / (ms - 1.0).powi(3)) * (wss_s / wss_r);
    let h = |lam: f64| ((mr - 1.0 + lam) / (ms - 1.0 + lam)).powi(2);
    bisect_monotone(h, target, "within-variance contrast")
}

/// Solve `(m−1+λ)²/(1−λ)² = num/den` for λ ∈ (−1, 1): the leave-out-mean
/// conditional-variance equation at a common size `m`. `num` is the
/// between-variance contrast and `den` the scaled within contrast
/// `Δ E[Ÿ′Ÿ]/(m(m−1)³)`.
pub fn solve_leave_out_wald(m: usize, num: f64, den: f64) -> Result<f64> {
    if den.abs() < CV_DENOM_TOL {
        return Err(Error::WeakIdentification(
            "within-variance contrast is numerically zero (category variances too close)".into(),
        ));
    }
    let ratio = num / den;
    if ratio <= 0.0 || !ratio.is_finite() {
        return Err(Error::OutOfRange(format!(
            "variance contrast ratio {ratio:.3e} is not positive"
        )));
    }
    let mf = m as f64;
    let g = |lam: f64| ((mf - 1.0 + lam) / (1.0 - lam)).powi(2);
    bisect_monotone(g, ratio, "leave-out-mean contrast")
}

/// Root of a strictly monotone positive function on (−1, 1).
fn bisect_monotone<F: Fn(f64) -> f64>(f: F, target: f64, what: &str) -> Result<f64> {
    let (mut lo, mut hi) = (-1.0 + 1e-12, 1.0 - 1e-12);
    let (f_lo, f_hi) = (f(lo) - target, f(hi) - target);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::OutOfRange(format!(
            "no root of the {what} in (-1, 1); inputs are inconsistent with the model"
        )));
    }
    let increasing = f_lo < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid) - target;
        if (v < 0.0) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fit the conditional-variance Wald estimator on a two-category dataset of
/// the covariate-free model. Between and within second moments are computed
/// per `(size, category)` cell (the between moment is the cell-centered
/// variance of `ȳ`, so an intercept does not leak into the contrast); the
/// Wald equation is solved per size and combined with harmonic cell-count
/// weights, and `σ_α²` comes from the combined ν moment at the solution.
pub fn fit_graham_cv(d: &Dataset, variant: CvVariant) -> Result<CvFit> {
    if d.j_categories() != 2 {
        return Err(Error::Domain(format!(
            "conditional-variance estimator needs exactly 2 categories, got {}",
            d.j_categories()
        )));
    }
    if d.k_z() > 1 {
        return Err(Error::Domain(
            "conditional-variance estimator supports the covariate-free model only".into(),
        ));
    }

    // per-(m, j) moments of ȳ and Ÿ'Ÿ
    #[derive(Default, Clone)]
    struct Cell {
        n: f64,
        sum_ybar: f64,
        sum_ybar2: f64,
        sum_wss: f64,
    }
    let mut cells: std::collections::BTreeMap<(usize, usize), Cell> = Default::default();
    for st in d.stats() {
        let c = cells.entry((st.m, st.cat)).or_default();
        c.n += 1.0;
        c.sum_ybar += st.ybar;
        c.sum_ybar2 += st.ybar * st.ybar;
        c.sum_wss += st.yy_w;
    }
    let moments = |m: usize, cat: usize| -> Option<(f64, f64, f64)> {
        let c = cells.get(&(m, cat))?;
        if c.n < 2.0 {
            return None;
        }
        let mean = c.sum_ybar / c.n;
        let vbar = (c.sum_ybar2 - c.n * mean * mean) / (c.n - 1.0);
        Some((vbar, c.sum_wss / c.n, c.n))
    };

    let sizes: std::collections::BTreeSet<usize> = cells.keys().map(|&(m, _)| m).collect();
    let mut num_pool = 0.0;
    let mut den_pool = 0.0;
    let mut lambda_acc = 0.0;
    let mut weight_acc = 0.0;
    let mut any_pair = false;
    for &m in &sizes {
        let (Some((v1, w1, n1)), Some((v2, w2, n2))) = (moments(m, 0), moments(m, 1)) else {
            continue;
        };
        any_pair = true;
        let mf = m as f64;
        let weight = n1 * n2 / (n1 + n2);
        match variant {
            CvVariant::LeaveOutMean => {
                let den = (w1 - w2) / (mf * (mf - 1.0).powi(3));
                if den.abs() < CV_DENOM_TOL {
                    continue;
                }
                if let Ok(lam) = solve_leave_out_wald(m, v1 - v2, den) {
                    lambda_acc += weight * lam;
                    weight_acc += weight;
                }
            }
            CvVariant::FullMean => {
                num_pool += weight * (v1 - v2);
                den_pool += weight * (w1 - w2) / (mf * (mf - 1.0));
            }
        }
    }
    if !any_pair {
        return Err(Error::WeakIdentification(
            "no group size is present in both categories with at least two groups each".into(),
        ));
    }

    let lambda = match variant {
        CvVariant::LeaveOutMean => {
            if weight_acc == 0.0 {
                return Err(Error::WeakIdentification(
                    "all within-variance contrasts are numerically zero (category variances too close)"
                        .into(),
                ));
            }
            lambda_acc / weight_acc
        }
        CvVariant::FullMean => {
            if den_pool.abs() < CV_DENOM_TOL {
                return Err(Error::WeakIdentification(
                    "pooled within-variance contrast is numerically zero".into(),
                ));
            }
            let gamma2 = num_pool / den_pool;
            if gamma2 <= 0.0 || !gamma2.is_finite() {
                return Err(Error::OutOfRange(format!(
                    "variance contrast ratio {gamma2:.3e} is not positive"
                )));
            }
            // constrained to (−∞, 1): take the positive root of (1−λ̃)²
            1.0 - (1.0 / gamma2).sqrt()
        }
    };

    // σ_α² from the combined ν moment, with cell-centered between variance
    let mut nu_sum = 0.0;
    let mut n_groups = 0.0;
    for (&(m, _cat), c) in &cells {
        let mf = m as f64;
        if c.n < 1.0 {
            continue;
        }
        let mean = c.sum_ybar / c.n;
        let central2 = c.sum_ybar2 - 2.0 * mean * c.sum_ybar + c.n * mean * mean;
        let scale = match variant {
            CvVariant::LeaveOutMean => (mf - 1.0 + lambda).powi(2) / (mf * (mf - 1.0).powi(3)),
            CvVariant::FullMean => 1.0 / (mf * (mf - 1.0)),
        };
        nu_sum += (1.0 - lambda).powi(2) * central2 - scale * c.sum_wss;
        n_groups += c.n;
    }
    Ok(CvFit {
        lambda,
        sigma_alpha2: nu_sum / n_groups,
    })
}
