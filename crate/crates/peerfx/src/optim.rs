//! Compact BFGS minimizer with an Armijo backtracking line search.
//!
//! The fitting problems here are smooth and low dimensional (3-6 free
//! coordinates), so a dense inverse-Hessian update with a sufficient-decrease
//! line search is enough. The update is skipped whenever the curvature
//! condition fails, and the approximation is reset to (scaled) identity if a
//! non-descent direction ever shows up.

use nalgebra::{DMatrix, DVector};

pub(crate) struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
}

pub(crate) struct BfgsOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MIN_STEP: f64 = 1e-18;

/// Minimize `f` from `x0`. The closure returns the value and gradient.
pub(crate) fn minimize<F>(x0: DVector<f64>, mut eval: F, opts: &BfgsOptions) -> BfgsOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = eval(&x);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        if g.amax() < opts.grad_tol {
            return BfgsOutcome {
                x,
                f,
                iterations,
                converged: true,
            };
        }
        iterations += 1;

        let mut dir = -(&h_inv * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 || !slope.is_finite() {
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = dir.dot(&g);
        }

        // backtracking line search with Armijo sufficient decrease
        let mut alpha = 1.0f64;
        let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
        while alpha > MIN_STEP {
            let x_new = &x + &dir * alpha;
            let (f_new, g_new) = eval(&x_new);
            if f_new.is_finite() && f_new <= f + ARMIJO_C1 * alpha * slope {
                best = Some((f_new, x_new, g_new));
                break;
            }
            alpha *= 0.5;
        }
        let (f_new, x_new, g_new) = match best {
            Some(t) => t,
            // step collapsed without decrease: treat the current point as final
            None => {
                return BfgsOutcome {
                    converged: g.amax() < opts.grad_tol,
                    x,
                    f,
                    iterations,
                }
            }
        };

        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            // BFGS inverse update
            let rho = 1.0 / sy;
            let hy = &h_inv * &yv;
            let yhy = yv.dot(&hy);
            // H += (sy + y'Hy) ρ² s s' − ρ (H y s' + s y' H)
            h_inv += (sy + yhy) * rho * rho * (&s * s.transpose());
            h_inv -= rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }

    BfgsOutcome {
        converged: g.amax() < opts.grad_tol,
        x,
        f,
        iterations,
    }
}

/// Golden-section minimization of a univariate function on `[lo, hi]`.
pub(crate) fn golden_section<F>(mut lo: f64, mut hi: f64, mut f: F, tol: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    while hi - lo > tol {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}
