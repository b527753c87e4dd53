//! Fringe fitting, phase-noise estimation and field reconstruction.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{covariance, levenberg_marquardt, sum_sq, weighted_linear, LmOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Root mean square of the unweighted residuals.
    pub residual_rms: f64,
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.values[k])
    }

    pub fn error(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.errors[k])
    }

    fn build(names: &[&str], values: Vec<f64>, cov: DMatrix<f64>, residual_rms: f64, chi2: f64, dof: usize, converged: bool) -> Self {
        let errors = (0..values.len()).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
        let covariance = (0..cov.nrows()).map(|i| cov.row(i).iter().cloned().collect()).collect();
        Self { names: names.iter().map(|s| s.to_string()).collect(), values, errors, covariance, residual_rms, chi2, dof, converged }
    }
}

fn check_xy(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("x and y lengths differ".into()));
    }
    if x.len() < min {
        return Err(Error::InvalidArgument(format!("need at least {min} points")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite data".into()));
    }
    Ok(())
}

fn sigmas(errors: Option<&[f64]>, n: usize) -> Result<(Vec<f64>, bool)> {
    match errors {
        Some(e) => {
            if e.len() != n || e.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(Error::InvalidArgument("errors must be positive, one per point".into()));
            }
            Ok((e.to_vec(), true))
        }
        None => Ok((vec![1.0; n], false)),
    }
}

/// Best linear fit of `a sin + b cos + c` at frequency `f`: returns
/// `(amplitude, phase, offset, weighted cost)` with `A sin(2 pi f t + phase)`.
pub fn sine_at_frequency(t: &[f64], y: &[f64], sigma: &[f64], f: f64) -> Option<(f64, f64, f64, f64)> {
    let n = t.len();
    let design = DMatrix::from_fn(n, 3, |i, k| match k {
        0 => (2.0 * PI * f * t[i]).sin(),
        1 => (2.0 * PI * f * t[i]).cos(),
        _ => 1.0,
    });
    let (c, _, chi2) = weighted_linear(&design, &DVector::from_column_slice(y), &DVector::from_column_slice(sigma))?;
    Some((c[0].hypot(c[1]), c[1].atan2(c[0]), c[2], chi2))
}

fn span(t: &[f64]) -> f64 {
    let lo = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// Candidate frequencies from a fixed grid, best few local minima first.
fn frequency_candidates(t: &[f64], y: &[f64], sigma: &[f64], keep: usize) -> Vec<f64> {
    let s = span(t);
    let f_max = 0.5 * (t.len() as f64 - 1.0) / s;
    let df = 0.05 / s;
    let f_min = 0.5 / s;
    let n = ((f_max - f_min) / df).ceil().max(1.0) as usize;
    let costs: Vec<(f64, f64)> = (0..=n)
        .map(|k| {
            let f = f_min + k as f64 * df;
            (f, sine_at_frequency(t, y, sigma, f).map_or(f64::INFINITY, |r| r.3))
        })
        .collect();
    let mut minima: Vec<(f64, f64)> = (0..costs.len())
        .filter(|&k| (k == 0 || costs[k].1 <= costs[k - 1].1) && (k + 1 == costs.len() || costs[k].1 <= costs[k + 1].1))
        .map(|k| costs[k])
        .collect();
    minima.sort_by(|a, b| a.1.total_cmp(&b.1));
    minima.into_iter().take(keep).map(|m| m.0).collect()
}

/// `A exp(-gamma t) sin(2 pi f t + phi) + c`; `p = [A, gamma, f, phi, c]`.
fn damped_model(p: &[f64], t: f64) -> f64 {
    p[0] * (-p[1] * t).exp() * (2.0 * PI * p[2] * t + p[3]).sin() + p[4]
}

fn damped_gradient(p: &[f64], t: f64) -> [f64; 5] {
    let e = (-p[1] * t).exp();
    let th = 2.0 * PI * p[2] * t + p[3];
    let (s, c) = th.sin_cos();
    [e * s, -t * p[0] * e * s, p[0] * e * c * 2.0 * PI * t, p[0] * e * c, 1.0]
}

fn fit_sinusoid(t: &[f64], y: &[f64], errors: Option<&[f64]>, damped: bool) -> Result<FitResult> {
    check_xy(t, y, if damped { 8 } else { 5 })?;
    let n = t.len();
    let (sig, absolute) = sigmas(errors, n)?;
    let free: Vec<usize> = if damped { vec![0, 1, 2, 3, 4] } else { vec![0, 2, 3, 4] };
    let np = free.len();
    let ts = t;
    let expand = |x: &DVector<f64>| {
        let mut p = [0.0; 5];
        for (k, &i) in free.iter().enumerate() {
            p[i] = x[k];
        }
        p
    };
    let resid = |x: &DVector<f64>| {
        let p = expand(x);
        DVector::from_iterator(n, (0..n).map(|i| (damped_model(&p, ts[i]) - y[i]) / sig[i]))
    };
    let jac = |x: &DVector<f64>| {
        let p = expand(x);
        DMatrix::from_fn(n, np, |i, k| damped_gradient(&p, ts[i])[free[k]] / sig[i])
    };
    let s = span(ts);
    let mut best: Option<crate::lsq::LmResult> = None;
    for f in frequency_candidates(ts, y, &sig, 4) {
        let (a, ph, c, _) = sine_at_frequency(ts, y, &sig, f).ok_or_else(|| Error::Degenerate("singular sine design".into()))?;
        let gammas: &[f64] = if damped { &[0.0, 1.0] } else { &[0.0] };
        for &g in gammas {
            let mut x0 = vec![a, g / s, f, ph, c];
            if !damped {
                x0.remove(1);
            }
            let r = levenberg_marquardt(&resid, &jac, DVector::from_vec(x0), LmOptions::default());
            if best.as_ref().is_none_or(|b| r.cost < b.cost) {
                best = Some(r);
            }
        }
    }
    let r = best.ok_or_else(|| Error::Degenerate("no frequency candidates".into()))?;
    let dof = n.saturating_sub(np).max(1);
    let s2 = if absolute { 1.0 } else { r.cost / dof as f64 };
    let mut cov = covariance(&r.jacobian, s2);
    let mut p = expand(&r.x);
    // canonical sign: positive amplitude, phase in (-pi, pi]
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[3] += PI;
        for k in 0..np {
            if free[k] != 0 {
                continue;
            }
            for j in 0..np {
                if j != k {
                    cov[(k, j)] = -cov[(k, j)];
                    cov[(j, k)] = -cov[(j, k)];
                }
            }
        }
    }
    p[3] = wrap_phase(p[3]);
    let rms = (sum_sq(&DVector::from_iterator(n, (0..n).map(|i| damped_model(&p, t[i]) - y[i]))) / n as f64).sqrt();
    let vals: Vec<f64> = free.iter().map(|&i| p[i]).collect();
    let chi2 = if absolute { r.cost } else { r.cost / s2.max(f64::MIN_POSITIVE) };
    if damped {
        let names = ["amplitude", "rate", "frequency", "phase", "offset"];
        let mut out = FitResult::build(&names, vals, cov, rms, chi2, dof, r.converged);
        let g = out.values[1];
        let eg = out.errors[1];
        let tau = if g > 0.0 { 1.0 / g } else { f64::INFINITY };
        out.names.push("tau".into());
        out.values.push(tau);
        out.errors.push(if g > 0.0 { eg / (g * g) } else { f64::INFINITY });
        Ok(out)
    } else {
        let names = ["amplitude", "frequency", "phase", "offset"];
        Ok(FitResult::build(&names, vals, cov, rms, chi2, dof, r.converged))
    }
}

/// Least-squares fit of `A exp(-t/tau) sin(2 pi f t + phi) + c`.
pub fn fit_damped_sine(t: &[f64], y: &[f64], errors: Option<&[f64]>) -> Result<FitResult> {
    if span(t) <= 0.0 {
        return Err(Error::InvalidArgument("times must span an interval".into()));
    }
    fit_sinusoid(t, y, errors, true)
}

/// Least-squares fit of `A sin(2 pi f t + phi) + c`.
pub fn fit_sine(t: &[f64], y: &[f64], errors: Option<&[f64]>) -> Result<FitResult> {
    if span(t) <= 0.0 {
        return Err(Error::InvalidArgument("times must span an interval".into()));
    }
    fit_sinusoid(t, y, errors, false)
}

pub fn wrap_phase(p: f64) -> f64 {
    let r = (p + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Orthogonal-distance fit of `A sin(2 pi f x + phi) + c` with errors on both axes.
/// Points with zero x-error keep their abscissa fixed.
pub fn fit_sine_odr(x: &[f64], y: &[f64], x_errors: &[f64], y_errors: &[f64]) -> Result<FitResult> {
    check_xy(x, y, 5)?;
    let n = x.len();
    if x_errors.len() != n || x_errors.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidArgument("x errors must be >= 0, one per point".into()));
    }
    if span(x) <= 0.0 {
        return Err(Error::Degenerate("all abscissae coincide".into()));
    }
    let start = fit_sine(x, y, Some(y_errors))?;
    let movable: Vec<usize> = (0..n).filter(|&i| x_errors[i] > 0.0).collect();
    let nm = movable.len();
    let model = |p: &[f64], xi: f64| p[0] * (2.0 * PI * p[1] * xi + p[2]).sin() + p[3];
    let resid = |v: &DVector<f64>| {
        let p = &v.as_slice()[..4];
        let mut xs = x.to_vec();
        for (k, &i) in movable.iter().enumerate() {
            xs[i] += v[4 + k];
        }
        let mut r = DVector::zeros(n + nm);
        for i in 0..n {
            r[i] = (model(p, xs[i]) - y[i]) / y_errors[i];
        }
        for (k, &i) in movable.iter().enumerate() {
            r[n + k] = v[4 + k] / x_errors[i];
        }
        r
    };
    let jac = |v: &DVector<f64>| {
        let p = &v.as_slice()[..4];
        let mut xs = x.to_vec();
        for (k, &i) in movable.iter().enumerate() {
            xs[i] += v[4 + k];
        }
        let mut j = DMatrix::zeros(n + nm, 4 + nm);
        for i in 0..n {
            let th = 2.0 * PI * p[1] * xs[i] + p[2];
            let (s, c) = th.sin_cos();
            j[(i, 0)] = s / y_errors[i];
            j[(i, 1)] = p[0] * c * 2.0 * PI * xs[i] / y_errors[i];
            j[(i, 2)] = p[0] * c / y_errors[i];
            j[(i, 3)] = 1.0 / y_errors[i];
        }
        for (k, &i) in movable.iter().enumerate() {
            let th = 2.0 * PI * p[1] * xs[i] + p[2];
            j[(i, 4 + k)] = p[0] * th.cos() * 2.0 * PI * p[1] / y_errors[i];
            j[(n + k, 4 + k)] = 1.0 / x_errors[i];
        }
        j
    };
    let mut v0 = vec![start.values[0], start.values[1], start.values[2], start.values[3]];
    v0.extend(std::iter::repeat_n(0.0, nm));
    let r = levenberg_marquardt(&resid, &jac, DVector::from_vec(v0), LmOptions::default());
    let full = covariance(&r.jacobian, 1.0);
    let cov = full.view((0, 0), (4, 4)).into_owned();
    let p = &r.x.as_slice()[..4];
    let rms = ((0..n).map(|i| (model(p, x[i]) - y[i]).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut vals = p.to_vec();
    if vals[0] < 0.0 {
        vals[0] = -vals[0];
        vals[2] += PI;
    }
    vals[2] = wrap_phase(vals[2]);
    Ok(FitResult::build(&["amplitude", "frequency", "phase", "offset"], vals, cov, rms, r.cost, n.saturating_sub(4).max(1), r.converged))
}

/// Population of the upper level after `R_x(theta2) Z(phi) R_x(theta1)` from the lower one.
pub fn ramsey_population(theta1: f64, theta2: f64, phi: f64) -> f64 {
    // amplitudes after the first pulse
    let (c1, s1) = ((theta1 / 2.0).cos(), (theta1 / 2.0).sin());
    let (c2, s2) = ((theta2 / 2.0).cos(), (theta2 / 2.0).sin());
    // lower: c1 e^{-i phi/2}; upper: -i s1 e^{i phi/2}
    let (lr, li) = (c1 * (phi / 2.0).cos(), -c1 * (phi / 2.0).sin());
    let (ur, ui) = (s1 * (phi / 2.0).sin(), -s1 * (phi / 2.0).cos());
    // upper after second pulse: -i s2 * lower + c2 * upper
    let re = s2 * li + c2 * ur;
    let im = -s2 * lr + c2 * ui;
    re * re + im * im
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseNoiseOptions {
    pub replicas: usize,
    pub seed: u64,
    /// Points per axis of the coarse and refined grids.
    pub coarse: usize,
    pub fine: usize,
    pub max_sigma: f64,
    /// Two-parameter chi-square level for the confidence region.
    pub chi2_level: f64,
}

impl Default for PhaseNoiseOptions {
    fn default() -> Self {
        Self { replicas: 200, seed: 0, coarse: 13, fine: 9, max_sigma: PI, chi2_level: 5.991 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseNoiseEstimate {
    pub contrast: f64,
    pub sigma_phi: f64,
    pub contrast_interval: (f64, f64),
    pub sigma_interval: (f64, f64),
    /// Fitted peak-to-peak amplitude and residual RMS of the data.
    pub data_amplitude: f64,
    pub data_rms: f64,
    /// Replica means at the best point with their Monte-Carlo standard errors.
    pub trial_amplitude: (f64, f64),
    pub trial_rms: (f64, f64),
    pub distance: f64,
    pub frequency: f64,
    /// Set when the data are consistent with zero contrast.
    pub zero_contrast: bool,
}

/// Smallest replica spread used when matching amplitude and RMS; keeps the
/// distance finite for noiseless data.
const MATCH_FLOOR: f64 = 1e-4;

struct TrialStats {
    amp: (f64, f64),
    rms: (f64, f64),
}

/// Amplitude (peak to peak) and residual RMS of a fixed-frequency sine fit.
fn amp_rms(t: &[f64], y: &[f64], f: f64) -> (f64, f64) {
    let ones = vec![1.0; t.len()];
    let (a, _, _, cost) = sine_at_frequency(t, y, &ones, f).unwrap_or((0.0, 0.0, 0.0, 0.0));
    (2.0 * a, (cost / t.len() as f64).sqrt())
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

#[allow(clippy::too_many_arguments)]
fn trial(t: &[f64], err: &[f64], f: f64, phase: f64, c: f64, sigma: f64, area_sigma: f64, opts: &PhaseNoiseOptions) -> TrialStats {
    let mut amps = Vec::with_capacity(opts.replicas);
    let mut rmss = Vec::with_capacity(opts.replicas);
    let mut y = vec![0.0; t.len()];
    for r in 0..opts.replicas {
        // common random numbers across grid points
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(r as u64);
        for i in 0..t.len() {
            let z: [f64; 4] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let phi = 2.0 * PI * f * t[i] + phase + sigma * z[0];
            let p = ramsey_population(PI / 2.0 + area_sigma * z[1], PI / 2.0 + area_sigma * z[2], phi);
            y[i] = 0.5 + c * (p - 0.5) + err[i] * z[3];
        }
        let (a, s) = amp_rms(t, &y, f);
        amps.push(a);
        rmss.push(s);
    }
    TrialStats { amp: mean_sd(&amps), rms: mean_sd(&rmss) }
}

/// Finds the contrast and phase-noise level whose simulated fringes give the
/// same fitted amplitude and residual RMS as the data.
pub fn phase_noise_estimate(t: &[f64], y: &[f64], errors: &[f64], area_sigma: f64, frequency: Option<f64>, opts: &PhaseNoiseOptions) -> Result<PhaseNoiseEstimate> {
    check_xy(t, y, 8)?;
    sigmas(Some(errors), t.len())?;
    if opts.replicas < 2 || opts.coarse < 3 || opts.fine < 3 {
        return Err(Error::InvalidArgument("need at least 2 replicas and 3 grid points".into()));
    }
    let f = match frequency {
        Some(f) => f,
        None => fit_sine(t, y, Some(errors))?.values[1],
    };
    let ones = vec![1.0; t.len()];
    let (_, ph, _, _) = sine_at_frequency(t, y, &ones, f).ok_or_else(|| Error::Degenerate("singular sine design".into()))?;
    // ramsey_population(pi/2, pi/2, phi) = (1 - cos phi)/2 = 1/2 + sin(phi - pi/2)/2
    let phase = ph + PI / 2.0;
    let (data_amp, data_rms) = amp_rms(t, y, f);
    let c_max = (1.5 * data_amp).clamp(0.2, 1.0).max(data_amp * 1.05);
    let score = |c: f64, s: f64| -> GridPoint {
        let st = trial(t, errors, f, phase, c, s, area_sigma, opts);
        let d = ((st.amp.0 - data_amp) / st.amp.1.max(MATCH_FLOOR)).powi(2) + ((st.rms.0 - data_rms) / st.rms.1.max(MATCH_FLOOR)).powi(2);
        GridPoint { c, s, d, st, step: (0.0, 0.0) }
    };
    let evaluate = |cs: &[f64], ss: &[f64]| -> Vec<GridPoint> {
        let step = (spacing(cs), spacing(ss));
        let pts: Vec<(f64, f64)> = cs.iter().flat_map(|&c| ss.iter().map(move |&s| (c, s))).collect();
        pts.par_iter().map(|&(c, s)| GridPoint { step, ..score(c, s) }).collect()
    };
    let lin = |a: f64, b: f64, n: usize| (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect::<Vec<_>>();
    let coarse_s = lin(0.0, opts.max_sigma, opts.coarse);
    let mut all = evaluate(&lin(0.0, c_max, opts.coarse), &coarse_s);
    let dc = c_max / (opts.coarse - 1) as f64;
    let ds = opts.max_sigma / (opts.coarse - 1) as f64;
    // amplitude grows with c, so the distance is unimodal along c
    let profile: Vec<GridPoint> = coarse_s.par_iter().map(|&s| GridPoint { step: (dc, ds), ..score(golden(|x| score(x, s).d, 0.0, c_max), s) }).collect();
    all.extend(profile);
    let best = all.iter().min_by(|a, b| a.d.total_cmp(&b.d)).unwrap();
    let (bc, bs) = (best.c, best.s);
    let fine = evaluate(&lin((bc - 1.5 * dc).max(0.0), (bc + 1.5 * dc).min(c_max), opts.fine), &lin((bs - 1.5 * ds).max(0.0), (bs + 1.5 * ds).min(opts.max_sigma), opts.fine));
    all.extend(fine);
    let best = all.iter().min_by(|a, b| a.d.total_cmp(&b.d)).unwrap();
    // continuous polish of the grid optimum; common random numbers keep the
    // objective smooth in (c, sigma)
    let (mut c, mut s) = (best.c, best.s);
    let (hc, hs) = (best.step.0.max(1e-9), best.step.1.max(1e-9));
    for _ in 0..3 {
        c = golden(|x| score(x, s).d, (c - hc).max(0.0), (c + hc).min(c_max));
        s = golden(|x| score(c, x).d, (s - hs).max(0.0), (s + hs).min(opts.max_sigma));
    }
    let polished = score(c, s);
    let best = if polished.d <= best.d { polished } else { GridPoint { step: (0.0, 0.0), ..score(best.c, best.s) } };
    let inside: Vec<&GridPoint> = all.iter().filter(|p| p.d <= opts.chi2_level).collect();
    // the region boundary is only resolved to the refined grid step
    let (fc, fs) = all.last().map_or((0.0, 0.0), |p| p.step);
    let range = |lo: f64, hi: f64, sel: &dyn Fn(&GridPoint) -> (f64, f64), fallback: f64| {
        if inside.is_empty() {
            (fallback, fallback)
        } else {
            let a = inside.iter().map(|p| sel(p).0 - sel(p).1).fold(f64::INFINITY, f64::min);
            let b = inside.iter().map(|p| sel(p).0 + sel(p).1).fold(f64::NEG_INFINITY, f64::max);
            (a.max(lo), b.min(hi))
        }
    };
    let ci_c = range(0.0, c_max, &|p| (p.c, fc), best.c);
    let ci_s = range(0.0, opts.max_sigma, &|p| (p.s, fs), best.s);
    let se = (opts.replicas as f64).sqrt();
    let zero_contrast = ci_c.0 <= 0.0;
    Ok(PhaseNoiseEstimate {
        contrast: if zero_contrast && best.c <= dc { 0.0 } else { best.c },
        sigma_phi: best.s,
        contrast_interval: ci_c,
        sigma_interval: ci_s,
        data_amplitude: data_amp,
        data_rms,
        trial_amplitude: (best.st.amp.0, best.st.amp.1 / se),
        trial_rms: (best.st.rms.0, best.st.rms.1 / se),
        distance: best.d,
        frequency: f,
        zero_contrast,
    })
}

struct GridPoint {
    c: f64,
    s: f64,
    d: f64,
    st: TrialStats,
    step: (f64, f64),
}

fn spacing(x: &[f64]) -> f64 {
    if x.len() < 2 {
        0.0
    } else {
        (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64
    }
}

/// Golden-section minimum of `f` on `[a, b]`.
fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..30 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 { x1 } else { x2 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionFit {
    /// Variance at zero time (rad^2).
    pub floor: f64,
    pub floor_error: f64,
    /// Diffusion coefficient in rad^2 per time unit of the input.
    pub d: f64,
    pub d_error: f64,
    /// Set when the fitted floor was negative and clipped to zero.
    pub clipped: bool,
}

impl DiffusionFit {
    pub fn sqrt_d(&self) -> (f64, f64) {
        let s = self.d.max(0.0).sqrt();
        (s, if s > 0.0 { self.d_error / (2.0 * s) } else { f64::INFINITY })
    }
}

/// Weighted straight-line fit of `Var(phi) = floor + D t`.
pub fn fit_phase_diffusion(t: &[f64], var: &[f64], var_errors: Option<&[f64]>) -> Result<DiffusionFit> {
    check_xy(t, var, 3)?;
    let n = t.len();
    let (sig, absolute) = sigmas(var_errors, n)?;
    let design = DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { t[i] });
    let (c, cov, chi2) = weighted_linear(&design, &DVector::from_column_slice(var), &DVector::from_column_slice(&sig)).ok_or_else(|| Error::Degenerate("need distinct times".into()))?;
    let s2 = if absolute { 1.0 } else { chi2 / (n - 2).max(1) as f64 };
    let clipped = c[0] < 0.0;
    Ok(DiffusionFit { floor: c[0].max(0.0), floor_error: (cov[(0, 0)] * s2).sqrt(), d: c[1], d_error: (cov[(1, 1)] * s2).sqrt(), clipped })
}

/// Ramsey phases of the two parallel interferometers, frequencies in Hz:
/// `phi1 = 2 pi T (4q - b - <d>_1)`, `phi2 = 2 pi T (8q - b - <d>_2)`.
pub fn forward_phases(q: f64, b: f64, t: f64, mean_d1: f64, mean_d2: f64) -> (f64, f64) {
    (2.0 * PI * t * (4.0 * q - b - mean_d1), 2.0 * PI * t * (8.0 * q - b - mean_d2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldEstimate {
    pub q: f64,
    pub b: f64,
    pub q_error: f64,
    pub b_error: f64,
}

/// Inverts [`forward_phases`]; `orders` are the fringe numbers added to the
/// wrapped phases.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_qb(phi1: f64, phi2: f64, t: f64, mean_d1: f64, mean_d2: f64, sigma1: f64, sigma2: f64, orders: (i64, i64)) -> Result<FieldEstimate> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument("interrogation time must be positive".into()));
    }
    let p1 = phi1 + 2.0 * PI * orders.0 as f64;
    let p2 = phi2 + 2.0 * PI * orders.1 as f64;
    let x1 = p1 / (2.0 * PI * t) + mean_d1;
    let x2 = p2 / (2.0 * PI * t) + mean_d2;
    Ok(FieldEstimate {
        q: (x2 - x1) / 4.0,
        b: x2 - 2.0 * x1,
        q_error: (sigma1 * sigma1 + sigma2 * sigma2).sqrt() / (8.0 * PI * t),
        b_error: (4.0 * sigma1 * sigma1 + sigma2 * sigma2).sqrt() / (2.0 * PI * t),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", deny_unknown_fields)]
pub enum SplitSpec {
    Threshold { coordinate: usize, value: f64 },
    Mixture { coordinate: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Threshold { coordinate: 1, value: 2.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub n: usize,
    pub mean: [f64; 2],
    pub sd: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Lower and upper group along the split coordinate.
    pub groups: [Group; 2],
    /// Upper minus lower group mean, per coordinate.
    pub separation: [f64; 2],
    pub separation_error: [f64; 2],
    pub significance: [f64; 2],
    /// Separation smaller than the larger within-group spread.
    pub below_spread: [bool; 2],
    pub bic_one: f64,
    pub bic_two: f64,
    pub prefers_two: bool,
}

fn group(samples: &[[f64; 2]]) -> Group {
    let n = samples.len();
    let mut mean = [0.0; 2];
    let mut sd = [0.0; 2];
    for c in 0..2 {
        let col: Vec<f64> = samples.iter().map(|s| s[c]).collect();
        let (m, s) = mean_sd(&col);
        mean[c] = m;
        sd[c] = if n > 1 { s } else { 0.0 };
    }
    Group { n, mean, sd }
}

fn normal_logpdf(x: f64, m: f64, s: f64) -> f64 {
    -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln()
}

/// Two-component Gaussian mixture by EM; returns (log likelihood, responsibilities of the upper component).
fn mixture(x: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len();
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = sorted.split_at(n / 2);
    let (mut m1, mut s1) = mean_sd(lo);
    let (mut m2, mut s2) = mean_sd(hi);
    let overall = mean_sd(x).1.max(1e-300);
    let floor = 1e-6 * overall;
    s1 = s1.max(floor);
    s2 = s2.max(floor);
    let mut w: f64 = 0.5;
    let mut resp = vec![0.5; n];
    let mut ll = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let mut new_ll = 0.0;
        for i in 0..n {
            let a = (1.0 - w).ln() + normal_logpdf(x[i], m1, s1);
            let b = w.ln() + normal_logpdf(x[i], m2, s2);
            let mx = a.max(b);
            let lse = mx + ((a - mx).exp() + (b - mx).exp()).ln();
            resp[i] = (b - lse).exp();
            new_ll += lse;
        }
        let r2: f64 = resp.iter().sum();
        let r1 = n as f64 - r2;
        if r1 < 1e-9 || r2 < 1e-9 {
            break;
        }
        w = r2 / n as f64;
        m1 = x.iter().zip(&resp).map(|(v, r)| (1.0 - r) * v).sum::<f64>() / r1;
        m2 = x.iter().zip(&resp).map(|(v, r)| r * v).sum::<f64>() / r2;
        s1 = (x.iter().zip(&resp).map(|(v, r)| (1.0 - r) * (v - m1).powi(2)).sum::<f64>() / r1).sqrt().max(floor);
        s2 = (x.iter().zip(&resp).map(|(v, r)| r * (v - m2).powi(2)).sum::<f64>() / r2).sqrt().max(floor);
        if (new_ll - ll).abs() < 1e-10 * new_ll.abs().max(1.0) {
            ll = new_ll;
            break;
        }
        ll = new_ll;
    }
    if m2 < m1 {
        for r in resp.iter_mut() {
            *r = 1.0 - *r;
        }
    }
    (ll, resp)
}

/// Splits 2-d samples in two groups and compares the groups coordinate-wise.
pub fn cluster_split(samples: &[[f64; 2]], spec: &SplitSpec) -> Result<ClusterReport> {
    let n = samples.len();
    if n < 10 {
        return Err(Error::InvalidArgument("need at least 10 samples".into()));
    }
    let coord = match spec {
        SplitSpec::Threshold { coordinate, .. } | SplitSpec::Mixture { coordinate } => *coordinate,
    };
    if coord > 1 {
        return Err(Error::InvalidArgument("coordinate must be 0 or 1".into()));
    }
    let x: Vec<f64> = samples.iter().map(|s| s[coord]).collect();
    let (ll2, resp) = mixture(&x);
    let (m, s) = mean_sd(&x);
    let s_ml = s * ((n as f64 - 1.0) / n as f64).sqrt();
    let ll1: f64 = x.iter().map(|&v| normal_logpdf(v, m, s_ml.max(1e-300))).sum();
    let ln_n = (n as f64).ln();
    let bic_one = -2.0 * ll1 + 2.0 * ln_n;
    let bic_two = -2.0 * ll2 + 5.0 * ln_n;
    let upper: Vec<bool> = match spec {
        SplitSpec::Threshold { value, .. } => x.iter().map(|&v| v >= *value).collect(),
        SplitSpec::Mixture { .. } => resp.iter().map(|&r| r >= 0.5).collect(),
    };
    let lo: Vec<[f64; 2]> = samples.iter().zip(&upper).filter(|(_, &u)| !u).map(|(s, _)| *s).collect();
    let hi: Vec<[f64; 2]> = samples.iter().zip(&upper).filter(|(_, &u)| u).map(|(s, _)| *s).collect();
    if lo.is_empty() || hi.is_empty() {
        return Err(Error::Degenerate("split left an empty group".into()));
    }
    let (g0, g1) = (group(&lo), group(&hi));
    let mut separation = [0.0; 2];
    let mut separation_error = [0.0; 2];
    let mut significance = [0.0; 2];
    let mut below_spread = [false; 2];
    for c in 0..2 {
        separation[c] = g1.mean[c] - g0.mean[c];
        separation_error[c] = (g0.sd[c].powi(2) / g0.n as f64 + g1.sd[c].powi(2) / g1.n as f64).sqrt();
        significance[c] = separation[c].abs() / separation_error[c].max(f64::MIN_POSITIVE);
        below_spread[c] = separation[c].abs() < g0.sd[c].max(g1.sd[c]);
    }
    Ok(ClusterReport { groups: [g0, g1], separation, separation_error, significance, below_spread, bic_one, bic_two, prefers_two: bic_two < bic_one })
}

/// Draws standard normal variates for synthetic data.
pub fn normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, t1: f64) -> Vec<f64> {
        (0..n).map(|i| t1 * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn damped_sine_exact_recovery() {
        let t = grid(400, 0.6);
        let p = [0.48, 1.0 / 0.298, 71.0, 0.7, 0.5];
        let y: Vec<f64> = t.iter().map(|&x| damped_model(&p, x)).collect();
        let r = fit_damped_sine(&t, &y, None).unwrap();
        assert!((r.get("tau").unwrap() / 0.298 - 1.0).abs() < 1e-6);
        assert!((r.get("frequency").unwrap() / 71.0 - 1.0).abs() < 1e-6);
        assert!((r.get("amplitude").unwrap() / 0.48 - 1.0).abs() < 1e-6);
        assert!((wrap_phase(r.get("phase").unwrap() - 0.7)).abs() < 1e-6);
        assert!((r.get("offset").unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn negative_amplitude_is_canonicalised() {
        let t = grid(100, 0.1);
        let y: Vec<f64> = t.iter().map(|&x| -0.3 * (2.0 * PI * 40.0 * x).sin()).collect();
        let r = fit_sine(&t, &y, None).unwrap();
        assert!(r.values[0] > 0.0);
        assert!((wrap_phase(r.values[2] - PI)).abs() < 1e-8);
    }

    #[test]
    fn odr_without_x_errors_is_least_squares() {
        let t = grid(60, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = normals(&mut rng, t.len());
        let y: Vec<f64> = t.iter().zip(&z).map(|(&x, e)| 0.5 + 0.4 * (2.0 * PI * 95.0 * x + 0.2).sin() + 0.01 * e).collect();
        let ey = vec![0.01; t.len()];
        let ols = fit_sine(&t, &y, Some(&ey)).unwrap();
        let odr = fit_sine_odr(&t, &y, &vec![0.0; t.len()], &ey).unwrap();
        for k in 0..4 {
            assert!((ols.values[k] - odr.values[k]).abs() < 1e-8, "{k}: {} vs {}", ols.values[k], odr.values[k]);
        }
    }

    #[test]
    fn odr_degenerate_x() {
        assert!(fit_sine_odr(&[1.0; 6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0], &[0.1; 6], &[0.1; 6]).is_err());
    }

    #[test]
    fn ramsey_population_limits() {
        assert!((ramsey_population(PI / 2.0, PI / 2.0, 0.0) - 1.0).abs() < 1e-15);
        assert!(ramsey_population(PI / 2.0, PI / 2.0, PI).abs() < 1e-15);
        assert!((ramsey_population(PI, 0.0, 0.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn diffusion_flat_when_d_zero() {
        let t = [5.0, 10.0, 20.0, 40.0];
        let r = fit_phase_diffusion(&t, &[0.09; 4], None).unwrap();
        assert!(r.d.abs() < 1e-12 && (r.floor - 0.09).abs() < 1e-12 && !r.clipped);
    }

    #[test]
    fn qb_round_trip_and_zero() {
        let (p1, p2) = forward_phases(-303.0, 1000.0, 0.004, 1.0, 1.0);
        let r = reconstruct_qb(p1, p2, 0.004, 1.0, 1.0, 0.1, 0.1, (0, 0)).unwrap();
        assert!((r.q + 303.0).abs() < 1e-9 && (r.b - 1000.0).abs() < 1e-9);
        assert_eq!(forward_phases(0.0, 0.0, 0.004, 0.0, 0.0), (0.0, 0.0));
        assert!(reconstruct_qb(0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.1, (0, 0)).is_err());
    }

    #[test]
    fn wrapped_phases_with_orders() {
        let (p1, p2) = forward_phases(-303.0, 1000.0, 0.004, 1.0, 1.0);
        let w = |p: f64| (wrap_phase(p), ((p - wrap_phase(p)) / (2.0 * PI)).round() as i64);
        let (a, na) = w(p1);
        let (b, nb) = w(p2);
        let r = reconstruct_qb(a, b, 0.004, 1.0, 1.0, 0.1, 0.1, (na, nb)).unwrap();
        assert!((r.q + 303.0).abs() < 1e-9 && (r.b - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cluster_too_few_and_empty() {
        let s = vec![[0.0, 1.0]; 5];
        assert!(cluster_split(&s, &SplitSpec::default()).is_err());
        let s = vec![[0.0, 1.0]; 20];
        assert!(cluster_split(&s, &SplitSpec::default()).is_err());
    }
}
