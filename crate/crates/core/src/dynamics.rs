//! Schrodinger and Lindblad propagation.
//!
//! Static pieces are propagated exactly: by eigendecomposition of `H` for pure
//! states and by exponentiating the Liouvillian for density matrices. Time
//! dependent pure-state problems use an adaptive fourth-order Magnus scheme;
//! time dependent master equations use adaptive Dormand-Prince 5(4).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HamiltonianPiece, LindbladSpec};
use crate::spin_core::{expm_hermitian, hermiticity_error, CMat, DensityMatrix, SpinState, C64, DIM};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    /// Steps are capped at `1 / (steps_per_period * f_max)`.
    pub steps_per_period: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-9, atol: 1e-12, steps_per_period: 50.0 }
    }
}

pub const POSITIVITY_FLOOR: f64 = -1e-8;

/// A Hamiltonian in Hz as a function of time.
pub trait Hamiltonian: Sync {
    fn eval(&self, t: f64) -> CMat;
    /// Whether `eval` is constant on `[t0, t1]`.
    fn is_static_on(&self, _t0: f64, _t1: f64) -> bool {
        false
    }
    fn max_frequency(&self, t0: f64, t1: f64) -> f64;
    /// Multiplier applied to light-shift-scaled dissipation channels.
    fn tls(&self, _t: f64) -> f64 {
        1.0
    }
    /// Times inside `(t0, t1)` where the definition changes.
    fn breakpoints(&self, _t0: f64, _t1: f64) -> Vec<f64> {
        Vec::new()
    }
}

impl Hamiltonian for HamiltonianPiece {
    fn eval(&self, t: f64) -> CMat {
        HamiltonianPiece::eval(self, t)
    }
    fn is_static_on(&self, _t0: f64, _t1: f64) -> bool {
        self.is_static()
    }
    fn max_frequency(&self, _t0: f64, _t1: f64) -> f64 {
        HamiltonianPiece::max_frequency(self)
    }
    fn tls(&self, t: f64) -> f64 {
        HamiltonianPiece::tls(self, t)
    }
}

/// Wraps a closure; `f_max` bounds its frequency content.
pub struct FnHamiltonian<F: Fn(f64) -> CMat + Sync> {
    pub f: F,
    pub f_max: f64,
}

impl<F: Fn(f64) -> CMat + Sync> Hamiltonian for FnHamiltonian<F> {
    fn eval(&self, t: f64) -> CMat {
        (self.f)(t)
    }
    fn max_frequency(&self, _t0: f64, _t1: f64) -> f64 {
        self.f_max
    }
}

/// Sampled evolution.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    pub tolerances: Tolerances,
}

impl<S> Trajectory<S> {
    pub fn last(&self) -> &S {
        self.states.last().expect("non-empty trajectory")
    }
}

pub trait HasPopulations {
    fn pops(&self) -> Vec<f64>;
}

impl HasPopulations for SpinState {
    fn pops(&self) -> Vec<f64> {
        self.populations()
    }
}

impl HasPopulations for DensityMatrix {
    fn pops(&self) -> Vec<f64> {
        self.populations()
    }
}

impl<S: HasPopulations> Trajectory<S> {
    /// Rows of `(t, p_{-9/2}, ..., p_{9/2})`.
    pub fn population_rows(&self) -> Vec<Vec<f64>> {
        self.times
            .iter()
            .zip(&self.states)
            .map(|(t, s)| std::iter::once(*t).chain(s.pops()).collect())
            .collect()
    }
}

fn check_hermitian(h: &dyn Hamiltonian, t: f64) -> Result<()> {
    let e = hermiticity_error(&h.eval(t));
    if e > 1e-9 {
        return Err(Error::NotHermitian(e));
    }
    Ok(())
}

fn validate_interval(t0: f64, t1: f64) -> Result<()> {
    if !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid interval [{t0}, {t1}]")));
    }
    Ok(())
}

/// Sample grid: `samples` if given (clipped to the interval), otherwise both endpoints.
fn sample_grid(t0: f64, t1: f64, samples: Option<&[f64]>) -> Result<Vec<f64>> {
    match samples {
        None => Ok(if t1 > t0 { vec![t0, t1] } else { vec![t0] }),
        Some(s) => {
            if s.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidArgument("sample times must increase strictly".into()));
            }
            if s.iter().any(|&t| t < t0 - 1e-15 || t > t1 + 1e-15) {
                return Err(Error::InvalidArgument("sample time outside interval".into()));
            }
            Ok(s.to_vec())
        }
    }
}

/// Dormand-Prince 5(4) with dense stopping at the requested times.
#[allow(clippy::too_many_arguments)]
fn dopri5<F>(f: F, y0: CMat, t0: f64, t1: f64, h_max: f64, tol: &Tolerances, stops: &[f64], mut on_stop: impl FnMut(f64, &CMat) -> Result<()>) -> Result<CMat>
where
    F: Fn(f64, &CMat) -> CMat,
{
    const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let mut t = t0;
    let mut y = y0;
    let mut h = h_max.min((t1 - t0).max(1e-300)) * 0.1;
    let mut k1 = f(t, &y);
    let mut stop_iter = stops.iter().peekable();
    while let Some(&&s) = stop_iter.peek() {
        if s <= t + 1e-15 * t.abs().max(1.0) {
            on_stop(s, &y)?;
            stop_iter.next();
        } else {
            break;
        }
    }
    while t < t1 {
        let next_stop = stop_iter.peek().map(|&&s| s).unwrap_or(t1).min(t1);
        let mut hs = h.min(h_max).min(next_stop - t);
        let land = hs >= next_stop - t;
        if hs < 1e-14 * t.abs().max(1e-3) {
            if next_stop - t < 1e-12 {
                hs = next_stop - t;
            } else {
                return Err(Error::StepUnderflow(t));
            }
        }
        let mut k: Vec<CMat> = Vec::with_capacity(7);
        k.push(k1.clone());
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = A[s][j];
                if a != 0.0 {
                    ys += kj * C64::from(a * hs);
                }
            }
            k.push(f(t + C[s] * hs, &ys));
        }
        let mut y_new = y.clone();
        let mut err = CMat::zeros(y.nrows(), y.ncols());
        for s in 0..7 {
            if B[s] != 0.0 {
                y_new += &k[s] * C64::from(B[s] * hs);
            }
            if E[s] != 0.0 {
                err += &k[s] * C64::from(E[s] * hs);
            }
        }
        // error per unit step keeps the global error near the requested tolerance
        let share = (hs / (t1 - t0)).clamp(1e-4, 1.0);
        let mut acc = 0.0;
        for (idx, e) in err.iter().enumerate() {
            let sc = share * (tol.atol + tol.rtol * y[idx].norm().max(y_new[idx].norm()));
            acc += (e.norm() / sc).powi(2);
        }
        let en = (acc / err.len() as f64).sqrt();
        if en <= 1.0 || hs <= 1e-14 {
            t = if land { next_stop } else { t + hs };
            y = y_new;
            k1 = k.swap_remove(6);
            while let Some(&&s) = stop_iter.peek() {
                if s <= t + 1e-15 * t.abs().max(1.0) {
                    on_stop(s, &y)?;
                    stop_iter.next();
                } else {
                    break;
                }
            }
            let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
            h = (hs * fac).min(h_max);
            if land && hs < h {
                // the landing step was truncated; do not shrink on its account
                h = h.max(hs);
            }
        } else {
            let fac = (0.9 * en.powf(-0.2)).clamp(0.1, 0.9);
            h = hs * fac;
        }
    }
    Ok(y)
}

/// Fourth-order Magnus integrator with step doubling; every step is an exact
/// unitary, so norms are preserved to rounding.
#[allow(clippy::too_many_arguments)]
fn magnus4(h: &dyn Hamiltonian, y0: CMat, t0: f64, t1: f64, h_max: f64, tol: &Tolerances, stops: &[f64], mut on_stop: impl FnMut(f64, &CMat) -> Result<()>) -> Result<CMat> {
    let c1 = 0.5 - 3f64.sqrt() / 6.0;
    let c2 = 0.5 + 3f64.sqrt() / 6.0;
    let step = |t: f64, dt: f64| -> CMat {
        let h1 = h.eval(t + c1 * dt);
        let h2 = h.eval(t + c2 * dt);
        // exp(-i K) with K = 2 pi [dt (H1 + H2) / 2 - i sqrt(3) pi dt^2 / 6 [H2, H1]]
        let comm = &h2 * &h1 - &h1 * &h2;
        let k = (&h1 + &h2) * C64::from(PI * dt) + comm * C64::new(0.0, -(3f64.sqrt()) * PI * PI * dt * dt / 3.0);
        expm_hermitian(&k, 1.0)
    };
    let mut t = t0;
    let mut y = y0;
    let mut dt = h_max.min((t1 - t0).max(1e-300));
    let mut stop_iter = stops.iter().peekable();
    while let Some(&&s) = stop_iter.peek() {
        if s <= t + 1e-15 * t.abs().max(1.0) {
            on_stop(s, &y)?;
            stop_iter.next();
        } else {
            break;
        }
    }
    while t < t1 {
        let next_stop = stop_iter.peek().map(|&&s| s).unwrap_or(t1).min(t1);
        let hs = dt.min(h_max).min(next_stop - t);
        let land = hs >= next_stop - t;
        if hs < 1e-14 * t.abs().max(1e-3) && next_stop - t > 1e-12 {
            return Err(Error::StepUnderflow(t));
        }
        let full = step(t, hs) * &y;
        let half = step(t + hs / 2.0, hs / 2.0) * (step(t, hs / 2.0) * &y);
        let share = (hs / (t1 - t0)).clamp(1e-4, 1.0);
        let mut acc = 0.0;
        for (idx, (a, b)) in full.iter().zip(half.iter()).enumerate() {
            let sc = share * (tol.atol + tol.rtol * y[idx].norm().max(b.norm()));
            acc += ((a - b).norm() / 15.0 / sc).powi(2);
        }
        let en = (acc / full.len() as f64).sqrt();
        if en <= 1.0 || hs <= 1e-14 {
            t = if land { next_stop } else { t + hs };
            y = half;
            while let Some(&&s) = stop_iter.peek() {
                if s <= t + 1e-15 * t.abs().max(1.0) {
                    on_stop(s, &y)?;
                    stop_iter.next();
                } else {
                    break;
                }
            }
            let fac = if en == 0.0 { 4.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 4.0) };
            dt = (hs * fac).min(h_max).max(if land { hs } else { 0.0 });
        } else {
            dt = hs * (0.9 * en.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Ok(y)
}

fn h_max_for(h: &dyn Hamiltonian, t0: f64, t1: f64, tol: &Tolerances) -> f64 {
    1.0 / (tol.steps_per_period * h.max_frequency(t0, t1).max(1e-9))
}

/// Pure-state evolution on `[t0, t1]`, sampled at `samples` (or the endpoints).
pub fn evolve_pure(state: &SpinState, h: &dyn Hamiltonian, t0: f64, t1: f64, tol: &Tolerances, samples: Option<&[f64]>) -> Result<Trajectory<SpinState>> {
    validate_interval(t0, t1)?;
    let norm = state.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized(norm));
    }
    check_hermitian(h, t0)?;
    let grid = sample_grid(t0, t1, samples)?;
    let mut states = Vec::with_capacity(grid.len());
    if h.is_static_on(t0, t1) {
        let hm = h.eval(t0);
        let mut cur = state.clone();
        let mut tc = t0;
        let mut cache: Option<(f64, CMat)> = None;
        for &ts in &grid {
            let dt = ts - tc;
            if dt != 0.0 {
                let u = match &cache {
                    Some((d, u)) if (d - dt).abs() <= 1e-15 * dt.abs() => u.clone(),
                    _ => {
                        let u = expm_hermitian(&hm, 2.0 * PI * dt);
                        cache = Some((dt, u.clone()));
                        u
                    }
                };
                cur = cur.apply(&u);
            }
            tc = ts;
            states.push(cur.clone());
        }
        return Ok(Trajectory { times: grid, states, tolerances: *tol });
    }
    let hmax = h_max_for(h, t0, t1, tol);
    let y0 = CMat::from_column_slice(DIM, 1, state.amplitudes().as_slice());
    magnus4(h, y0, t0, t1, hmax, tol, &grid, |_, y| {
        states.push(SpinState::from_raw(crate::spin_core::CVec::from_column_slice(y.as_slice())));
        Ok(())
    })?;
    for s in &states {
        if (s.norm() - 1.0).abs() > 1e-7 {
            return Err(Error::NotNormalized(s.norm()));
        }
    }
    Ok(Trajectory { times: grid, states, tolerances: *tol })
}

/// Single-particle propagator on `[t0, t1]`.
pub fn propagator(h: &dyn Hamiltonian, t0: f64, t1: f64, tol: &Tolerances) -> Result<CMat> {
    validate_interval(t0, t1)?;
    if t1 == t0 {
        return Ok(CMat::identity(DIM, DIM));
    }
    check_hermitian(h, t0)?;
    if h.is_static_on(t0, t1) {
        return Ok(expm_hermitian(&h.eval(t0), 2.0 * PI * (t1 - t0)));
    }
    let hmax = h_max_for(h, t0, t1, tol);
    magnus4(h, CMat::identity(DIM, DIM), t0, t1, hmax, tol, &[], |_, _| Ok(()))
}

/// Dissipator split by structure so that the right-hand side stays cheap.
#[derive(Clone, Debug)]
pub struct CompiledDissipator {
    /// `rho_ij -> rho_ij * k_ij` from all diagonal jump operators.
    diag_tls: CMat,
    diag_fixed: CMat,
    /// `(from, to, rate, tls_scaled)` for operators `|to><from|`.
    jumps: Vec<(usize, usize, f64, bool)>,
    general: Vec<(CMat, f64, bool)>,
}

impl CompiledDissipator {
    pub fn new(spec: &LindbladSpec) -> Result<Self> {
        spec.validate()?;
        let mut diag_tls = CMat::zeros(DIM, DIM);
        let mut diag_fixed = CMat::zeros(DIM, DIM);
        let mut jumps = Vec::new();
        let mut general = Vec::new();
        for c in &spec.channels {
            if c.rate == 0.0 {
                continue;
            }
            let nz: Vec<(usize, usize)> = (0..DIM)
                .flat_map(|i| (0..DIM).map(move |j| (i, j)))
                .filter(|&(i, j)| c.op[(i, j)].norm() != 0.0)
                .collect();
            let diagonal = nz.iter().all(|&(i, j)| i == j);
            if diagonal {
                let target = if c.tls_scaled { &mut diag_tls } else { &mut diag_fixed };
                for i in 0..DIM {
                    for j in 0..DIM {
                        let xi = c.op[(i, i)];
                        let xj = c.op[(j, j)];
                        target[(i, j)] += (xi * xj.conj() - C64::from(0.5 * (xi.norm_sqr() + xj.norm_sqr()))) * c.rate;
                    }
                }
            } else if nz.len() == 1 {
                let (to, from) = nz[0];
                jumps.push((from, to, c.rate * c.op[(to, from)].norm_sqr(), c.tls_scaled));
            } else {
                general.push((c.op.clone(), c.rate, c.tls_scaled));
            }
        }
        Ok(Self { diag_tls, diag_fixed, jumps, general })
    }

    pub fn is_empty(&self) -> bool {
        self.jumps.is_empty() && self.general.is_empty() && self.diag_tls.iter().all(|z| z.norm() == 0.0) && self.diag_fixed.iter().all(|z| z.norm() == 0.0)
    }

    fn apply(&self, rho: &CMat, tls: f64, out: &mut CMat) {
        for i in 0..DIM {
            for j in 0..DIM {
                out[(i, j)] += rho[(i, j)] * (self.diag_tls[(i, j)] * tls + self.diag_fixed[(i, j)]);
            }
        }
        for &(a, b, rate, scaled) in &self.jumps {
            let r = if scaled { rate * tls } else { rate };
            out[(b, b)] += rho[(a, a)] * r;
            for k in 0..DIM {
                out[(a, k)] -= rho[(a, k)] * (0.5 * r);
                out[(k, a)] -= rho[(k, a)] * (0.5 * r);
            }
        }
        for (l, rate, scaled) in &self.general {
            let r = if *scaled { rate * tls } else { *rate };
            let ldl = l.adjoint() * l;
            *out += (l * rho * l.adjoint() - (&ldl * rho + rho * &ldl) * C64::from(0.5)) * C64::from(r);
        }
    }

    /// Superoperator for column-stacked `rho`.
    fn superoperator(&self, tls: f64) -> CMat {
        let n = DIM;
        let mut s = CMat::zeros(n * n, n * n);
        for i in 0..n {
            for j in 0..n {
                s[(i + n * j, i + n * j)] += self.diag_tls[(i, j)] * tls + self.diag_fixed[(i, j)];
            }
        }
        for &(a, b, rate, scaled) in &self.jumps {
            let r = if scaled { rate * tls } else { rate };
            s[(b + n * b, a + n * a)] += C64::from(r);
            for k in 0..n {
                s[(a + n * k, a + n * k)] -= C64::from(0.5 * r);
                s[(k + n * a, k + n * a)] -= C64::from(0.5 * r);
            }
        }
        let id = CMat::identity(n, n);
        for (l, rate, scaled) in &self.general {
            let r = if *scaled { rate * tls } else { *rate };
            let ldl = l.adjoint() * l;
            let term = l.map(|z| z.conj()).kronecker(l) - id.kronecker(&ldl) * C64::from(0.5) - ldl.transpose().kronecker(&id) * C64::from(0.5);
            s += term * C64::from(r);
        }
        s
    }
}

/// Liouvillian of `-2 pi i [H, rho] + D(rho)` acting on column-stacked `rho`.
pub fn liouvillian(h: &CMat, diss: &CompiledDissipator, tls: f64) -> CMat {
    let n = DIM;
    let id = CMat::identity(n, n);
    let coh = (id.kronecker(h) - h.transpose().kronecker(&id)) * C64::new(0.0, -2.0 * PI);
    coh + diss.superoperator(tls)
}

fn lindblad_rhs(h: &dyn Hamiltonian, diss: &CompiledDissipator, t: f64, rho: &CMat) -> CMat {
    let hm = h.eval(t);
    let mut out = (&hm * rho - rho * &hm) * C64::new(0.0, -2.0 * PI);
    diss.apply(rho, h.tls(t), &mut out);
    out
}

fn check_density(rho: &CMat) -> Result<DensityMatrix> {
    let d = DensityMatrix::from_raw((rho + rho.adjoint()) * C64::from(0.5));
    let tr = d.trace();
    if (tr - 1.0).abs() > 1e-7 {
        return Err(Error::NotNormalized(tr));
    }
    let lam = d.min_eigenvalue();
    if lam < POSITIVITY_FLOOR {
        return Err(Error::Positivity(lam));
    }
    Ok(d)
}

/// Master-equation evolution on `[t0, t1]`.
pub fn evolve_density(rho: &DensityMatrix, h: &dyn Hamiltonian, spec: &LindbladSpec, t0: f64, t1: f64, tol: &Tolerances, samples: Option<&[f64]>) -> Result<Trajectory<DensityMatrix>> {
    let diss = CompiledDissipator::new(spec)?;
    evolve_density_compiled(rho, h, &diss, t0, t1, tol, samples)
}

pub fn evolve_density_compiled(
    rho: &DensityMatrix,
    h: &dyn Hamiltonian,
    diss: &CompiledDissipator,
    t0: f64,
    t1: f64,
    tol: &Tolerances,
    samples: Option<&[f64]>,
) -> Result<Trajectory<DensityMatrix>> {
    validate_interval(t0, t1)?;
    DensityMatrix::from_matrix(rho.matrix().clone())?;
    check_hermitian(h, t0)?;
    let grid = sample_grid(t0, t1, samples)?;
    let mut states = Vec::with_capacity(grid.len());
    if h.is_static_on(t0, t1) {
        let hm = h.eval(t0);
        if diss.is_empty() {
            let mut tc = t0;
            let mut cur = rho.clone();
            for &ts in &grid {
                if ts != tc {
                    cur = cur.transform(&expm_hermitian(&hm, 2.0 * PI * (ts - tc)));
                }
                tc = ts;
                states.push(cur.clone());
            }
            return Ok(Trajectory { times: grid, states, tolerances: *tol });
        }
        let lv = liouvillian(&hm, diss, h.tls(t0));
        let mut v = CMat::from_column_slice(DIM * DIM, 1, rho.matrix().as_slice());
        let mut tc = t0;
        let mut cache: Option<(f64, CMat)> = None;
        for &ts in &grid {
            let dt = ts - tc;
            if dt != 0.0 {
                match &cache {
                    // sample spacings differ by rounding; correct the residual to first order
                    Some((d, e)) if (d - dt).abs() <= 1e-9 * dt.abs() => {
                        v = e * v;
                        let r = dt - d;
                        if r != 0.0 {
                            v += &lv * &v * C64::from(r);
                        }
                    }
                    _ => {
                        let e = (&lv * C64::from(dt)).exp();
                        v = &e * v;
                        cache = Some((dt, e));
                    }
                }
            }
            tc = ts;
            states.push(check_density(&CMat::from_column_slice(DIM, DIM, v.as_slice()))?);
        }
        return Ok(Trajectory { times: grid, states, tolerances: *tol });
    }
    let hmax = h_max_for(h, t0, t1, tol);
    dopri5(|t, r| lindblad_rhs(h, diss, t, r), rho.matrix().clone(), t0, t1, hmax, tol, &grid, |_, y| {
        states.push(check_density(y)?);
        Ok(())
    })?;
    Ok(Trajectory { times: grid, states, tolerances: *tol })
}

/// An element of a compiled sequence.
#[derive(Clone, Debug)]
pub enum Step {
    Evolve(HamiltonianPiece),
    /// Ideal instantaneous unitary at time `t`.
    Instant { t: f64, unitary: CMat },
}

impl Step {
    pub fn start(&self) -> f64 {
        match self {
            Step::Evolve(p) => p.t0,
            Step::Instant { t, .. } => *t,
        }
    }
    pub fn end(&self) -> f64 {
        match self {
            Step::Evolve(p) => p.t1,
            Step::Instant { t, .. } => *t,
        }
    }
}

fn samples_in(samples: &[f64], t0: f64, t1: f64, first: bool) -> Vec<f64> {
    samples.iter().cloned().filter(|&s| (if first { s >= t0 } else { s > t0 }) && s <= t1).collect()
}

/// Runs consecutive steps on a pure state; `samples` must lie inside the schedule.
pub fn run_steps_pure(state: &SpinState, steps: &[Step], tol: &Tolerances, samples: &[f64]) -> Result<Trajectory<SpinState>> {
    let mut cur = state.clone();
    let mut times = Vec::new();
    let mut states = Vec::new();
    let start = steps.first().map_or(0.0, |s| s.start());
    if samples.first().is_some_and(|&s| s <= start) {
        times.push(samples[0]);
        states.push(cur.clone());
    }
    for st in steps {
        match st {
            Step::Instant { unitary, .. } => cur = cur.apply(unitary),
            Step::Evolve(p) => {
                let inner = samples_in(samples, p.t0, p.t1, false);
                let mut grid = inner.clone();
                if grid.last().is_none_or(|&l| l < p.t1) {
                    grid.push(p.t1);
                }
                let tr = evolve_pure(&cur, p, p.t0, p.t1, tol, Some(&grid))?;
                for (t, s) in tr.times.iter().zip(&tr.states) {
                    if inner.contains(t) {
                        times.push(*t);
                        states.push(s.clone());
                    }
                }
                cur = tr.last().clone();
            }
        }
    }
    if times.is_empty() || *times.last().unwrap() < steps.last().map_or(start, |s| s.end()) {
        times.push(steps.last().map_or(start, |s| s.end()));
        states.push(cur);
    }
    Ok(Trajectory { times, states, tolerances: *tol })
}

pub fn run_steps_density(rho: &DensityMatrix, steps: &[Step], spec: &LindbladSpec, tol: &Tolerances, samples: &[f64]) -> Result<Trajectory<DensityMatrix>> {
    let diss = CompiledDissipator::new(spec)?;
    let mut cur = rho.clone();
    let mut times = Vec::new();
    let mut states = Vec::new();
    let start = steps.first().map_or(0.0, |s| s.start());
    if samples.first().is_some_and(|&s| s <= start) {
        times.push(samples[0]);
        states.push(cur.clone());
    }
    for st in steps {
        match st {
            Step::Instant { unitary, .. } => cur = cur.transform(unitary),
            Step::Evolve(p) => {
                let inner = samples_in(samples, p.t0, p.t1, false);
                let mut grid = inner.clone();
                if grid.last().is_none_or(|&l| l < p.t1) {
                    grid.push(p.t1);
                }
                let tr = evolve_density_compiled(&cur, p, &diss, p.t0, p.t1, tol, Some(&grid))?;
                for (t, s) in tr.times.iter().zip(&tr.states) {
                    if inner.contains(t) {
                        times.push(*t);
                        states.push(s.clone());
                    }
                }
                cur = tr.last().clone();
            }
        }
    }
    if times.is_empty() || *times.last().unwrap() < steps.last().map_or(start, |s| s.end()) {
        times.push(steps.last().map_or(start, |s| s.end()));
        states.push(cur);
    }
    Ok(Trajectory { times, states, tolerances: *tol })
}

/// Product of the step propagators, later steps on the left.
pub fn steps_propagator(steps: &[Step], tol: &Tolerances) -> Result<CMat> {
    let mut u = CMat::identity(DIM, DIM);
    for st in steps {
        match st {
            Step::Instant { unitary, .. } => u = unitary * u,
            Step::Evolve(p) => u = propagator(p, p.t0, p.t1, tol)? * u,
        }
    }
    Ok(u)
}

/// Process matrix of the channel realized by `steps`, acting on column-stacked `rho`.
pub fn steps_superoperator(steps: &[Step], spec: &LindbladSpec, tol: &Tolerances) -> Result<CMat> {
    let diss = CompiledDissipator::new(spec)?;
    let n = DIM;
    let mut s = CMat::identity(n * n, n * n);
    let id = CMat::identity(n, n);
    for st in steps {
        match st {
            Step::Instant { unitary, .. } => {
                s = unitary.map(|z| z.conj()).kronecker(unitary) * s;
            }
            Step::Evolve(p) => {
                if p.is_static() {
                    let lv = liouvillian(&p.eval(p.t0), &diss, p.tls(p.t0));
                    s = (lv * C64::from(p.duration())).exp() * s;
                } else {
                    let hmax = h_max_for(p, p.t0, p.t1, tol);
                    let rhs = |t: f64, y: &CMat| {
                        let lv = liouvillian(&p.eval(t), &diss, p.tls(t));
                        lv * y
                    };
                    s = dopri5(rhs, s, p.t0, p.t1, hmax, tol, &[], |_, _| Ok(()))?;
                }
            }
        }
    }
    let _ = id;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_piece, raman_hamiltonian, Coupling, Detuning, FieldParams, Frame, FrameState, LevelShifts, RamanTone};
    use crate::spin_core::{max_abs, pair_rotation, unitarity_error, Axis, Pair};

    fn two_level(omega: f64, detuning: f64) -> HamiltonianPiece {
        let mut tone = RamanTone::resonant(Pair::new(-2.5, -1.5).unwrap(), omega);
        tone.coupling = Coupling::target_only();
        tone.detuning = Detuning::Fixed(-detuning);
        let s = LevelShifts { b: 0.0, q: 0.0 };
        let fs = FrameState { frame: Frame::Rotating, lo0: -detuning, lo1: -detuning, lo_cycles: 0.0 };
        build_piece(&[tone], &s, &s, 0.0, f64::INFINITY, fs, 1.0, 1.0)
    }

    #[test]
    fn resonant_pi_pulse() {
        let omega = 71.0;
        let h = two_level(omega, 0.0);
        let tr = evolve_pure(&SpinState::basis(-2.5).unwrap(), &h, 0.0, 0.5 / omega, &Tolerances::default(), None).unwrap();
        assert!((tr.last().populations()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detuned_max_transfer_half() {
        let omega = 50.0;
        let h = two_level(omega, 50.0);
        let gen = (2.0f64).sqrt() * omega;
        let t = 0.5 / gen;
        let tr = evolve_pure(&SpinState::basis(-2.5).unwrap(), &h, 0.0, t, &Tolerances::default(), None).unwrap();
        assert!((tr.last().populations()[3] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn zero_hamiltonian_keeps_state() {
        let h = FnHamiltonian { f: |_t| CMat::zeros(DIM, DIM), f_max: 1.0 };
        let s = SpinState::basis(0.5).unwrap();
        let tr = evolve_pure(&s, &h, 0.0, 1.0, &Tolerances::default(), None).unwrap();
        assert!((tr.last().inner(&s).norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rk_matches_exact_for_static() {
        let h = two_level(71.0, 13.0);
        let exact = propagator(&h, 0.0, 0.03, &Tolerances::default()).unwrap();
        let wrapped = FnHamiltonian { f: |t| h.eval(t), f_max: 100.0 };
        let rk = propagator(&wrapped, 0.0, 0.03, &Tolerances::default()).unwrap();
        let e = max_abs(&(exact - rk));
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn pi_half_propagator_is_rotation() {
        let h = two_level(80.0, 0.0);
        let u = propagator(&h, 0.0, 0.25 / 80.0, &Tolerances::default()).unwrap();
        let r = pair_rotation(Pair::new(-2.5, -1.5).unwrap(), Axis::X, PI / 2.0);
        assert!(max_abs(&(u - r)) < 1e-12);
        assert!(propagator(&h, 1.0, 1.0, &Tolerances::default()).unwrap() == CMat::identity(DIM, DIM));
    }

    #[test]
    fn composition_property() {
        let tone = RamanTone::resonant(Pair::new(-3.5, -2.5).unwrap(), 90.0);
        let mut h = raman_hamiltonian(&[tone], &FieldParams::new(960.0, -320.0), Frame::LabBeat).unwrap();
        h.t1 = 0.01;
        let tol = Tolerances::default();
        let u02 = propagator(&h, 0.0, 0.01, &tol).unwrap();
        let u01 = propagator(&h, 0.0, 0.004, &tol).unwrap();
        let u12 = propagator(&h, 0.004, 0.01, &tol).unwrap();
        let e = max_abs(&(u02.clone() - u12 * u01));
        assert!(e < 1e-9, "{e}");
        let ue = unitarity_error(&u02);
        assert!(ue < 1e-10, "{ue}");
    }

    #[test]
    fn density_matches_pure_without_dissipation() {
        let tone = RamanTone::resonant(Pair::new(-2.5, -1.5).unwrap(), 71.0);
        let h = raman_hamiltonian(&[tone], &FieldParams::new(960.0, -320.0), Frame::Rotating).unwrap();
        let psi = SpinState::basis(-2.5).unwrap();
        let tol = Tolerances::default();
        let p = evolve_pure(&psi, &h, 0.0, 0.02, &tol, None).unwrap();
        let d = evolve_density(&psi.density(), &h, &LindbladSpec::empty(), 0.0, 0.02, &tol, None).unwrap();
        assert!(d.last().fidelity_with(p.last()) > 1.0 - 1e-9);
    }

    #[test]
    fn dephasing_decay_of_superposition() {
        use crate::model::Channel;
        let g = 3.0;
        let mut op = CMat::zeros(DIM, DIM);
        op[(2, 2)] = C64::from(1.0);
        op[(3, 3)] = C64::from(-1.0);
        // sigma_z with rate g/2 gives coherence decay g
        let spec = LindbladSpec { channels: vec![Channel { label: "z".into(), op, rate: g / 2.0, tls_scaled: false }] };
        let r = 0.5f64.sqrt();
        let mut a = vec![C64::from(0.0); DIM];
        a[2] = C64::from(r);
        a[3] = C64::from(r);
        let psi = SpinState::from_amplitudes(&a).unwrap();
        let h = FnHamiltonian { f: |_t| CMat::zeros(DIM, DIM), f_max: 1.0 };
        let tr = evolve_density(&psi.density(), &h, &spec, 0.0, 0.4, &Tolerances::default(), None).unwrap();
        let c = tr.last().matrix()[(2, 3)].norm();
        assert!((c - 0.5 * (-g * 0.4f64).exp()).abs() < 1e-9);
    }
}
