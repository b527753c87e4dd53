//! Damped Gauss-Newton (Levenberg-Marquardt) for small dense problems.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative reduction of the cost below which iteration stops.
    pub ftol: f64,
    /// Relative step size below which iteration stops.
    pub xtol: f64,
    pub gtol: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 500, ftol: 1e-15, xtol: 1e-14, gtol: 1e-15, lambda0: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct LmResult {
    pub x: DVector<f64>,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn sum_sq(r: &DVector<f64>) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Central-difference Jacobian.
pub fn numeric_jacobian<F>(f: &F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let r0 = f(x);
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    for k in 0..x.len() {
        let h = 1e-6 * x[k].abs().max(1e-3);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let d = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(k, &d);
    }
    jac
}

pub fn levenberg_marquardt<F, J>(f: F, jac: J, x0: DVector<f64>, opts: LmOptions) -> LmResult
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let mut x = x0;
    let mut r = f(&x);
    let mut cost = sum_sq(&r);
    let mut jm = jac(&x);
    let mut lambda = opts.lambda0;
    let mut converged = false;
    let mut iterations = 0;
    if !cost.is_finite() {
        return LmResult { x, residuals: r, jacobian: jm, cost, iterations, converged };
    }
    while iterations < opts.max_iter {
        iterations += 1;
        let jt = jm.transpose();
        let jtj = &jt * &jm;
        let g = &jt * &r;
        if g.amax() <= opts.gtol * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let step = match a.clone().cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => match a.svd(true, true).solve(&(-&g), 1e-14) {
                    Ok(s) => s,
                    Err(_) => break,
                },
            };
            let xn = &x + &step;
            let rn = f(&xn);
            let cn = sum_sq(&rn);
            if cn.is_finite() && cn <= cost {
                let rel = (cost - cn) / cost.max(1e-300);
                let small_step = step.norm() <= opts.xtol * (x.norm() + opts.xtol);
                x = xn;
                r = rn;
                cost = cn;
                lambda = (lambda * 0.3).max(1e-15);
                accepted = true;
                if rel < opts.ftol || small_step || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted {
            // no descent direction left: at a minimum to working precision
            converged = true;
            break;
        }
        jm = jac(&x);
        if converged {
            break;
        }
    }
    LmResult { x, residuals: r, jacobian: jm, cost, iterations, converged }
}

/// `(J^T J)^-1 * s2`, pseudo-inverse when singular.
pub fn covariance(jac: &DMatrix<f64>, s2: f64) -> DMatrix<f64> {
    let jtj = jac.transpose() * jac;
    let inv = jtj.clone().try_inverse().unwrap_or_else(|| {
        jtj.clone().pseudo_inverse(1e-14).unwrap_or_else(|_| DMatrix::from_element(jtj.nrows(), jtj.ncols(), f64::NAN))
    });
    inv * s2
}

/// Weighted linear least squares; returns (coefficients, covariance, chi2).
pub fn weighted_linear(design: &DMatrix<f64>, y: &DVector<f64>, sigma: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>, f64)> {
    let mut a = design.clone();
    let mut b = y.clone();
    for i in 0..a.nrows() {
        let w = 1.0 / sigma[i];
        a.row_mut(i).scale_mut(w);
        b[i] *= w;
    }
    let ata = a.transpose() * &a;
    let cov = ata.try_inverse()?;
    let coef = &cov * (a.transpose() * &b);
    let chi2 = sum_sq(&(&a * &coef - b));
    Some((coef, cov, chi2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_minimum() {
        let f = |x: &DVector<f64>| DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
        let j = |x: &DVector<f64>| DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]);
        let res = levenberg_marquardt(f, j, DVector::from_vec(vec![-1.2, 1.0]), LmOptions::default());
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-9 && (res.x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn numeric_jacobian_matches_analytic() {
        let f = |x: &DVector<f64>| DVector::from_vec(vec![x[0].sin() * x[1], x[1].exp()]);
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let jn = numeric_jacobian(&f, &x);
        let ja = DMatrix::from_row_slice(2, 2, &[0.3f64.cos() * -0.7, 0.3f64.sin(), 0.0, (-0.7f64).exp()]);
        assert!((jn - ja).amax() < 1e-8);
    }

    #[test]
    fn straight_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let design = DMatrix::from_fn(4, 2, |i, k| if k == 0 { 1.0 } else { x[i] });
        let y = DVector::from_iterator(4, x.iter().map(|t| 2.0 + 0.5 * t));
        let (c, _, chi2) = weighted_linear(&design, &y, &DVector::from_element(4, 0.1)).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12 && chi2 < 1e-20);
    }
}
