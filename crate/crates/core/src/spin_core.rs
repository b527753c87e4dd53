//! Linear algebra on the spin-9/2 Zeeman manifold.
//!
//! Basis index `i` corresponds to `m = i - 9/2`, so index 0 is `m = -9/2`.
//! A pair rotation by angle `theta` about axis `a` is `exp(-i theta sigma^a / 2)`.
//! The pair Pauli matrices are written in the ordered basis (low, high) with
//! `sigma^z = P_low - P_high` and `<low|sigma^y|high> = -i`.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const SPIN: f64 = 4.5;
pub const DIM: usize = 10;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

fn is_half_integer(x: f64) -> bool {
    x.is_finite() && ((2.0 * x).round() - 2.0 * x).abs() < 1e-9
}

/// Basis index of projection `m`.
pub fn index_of(m: f64) -> Result<usize> {
    let k = m + SPIN;
    if !is_half_integer(m) || (k.round() - k).abs() > 1e-9 || !(-1e-9..=9.0 + 1e-9).contains(&k) {
        return Err(Error::InvalidProjection(m));
    }
    Ok(k.round() as usize)
}

/// Projection carried by basis index `i`.
pub fn projection(i: usize) -> f64 {
    i as f64 - SPIN
}

pub fn projections() -> [f64; DIM] {
    std::array::from_fn(projection)
}

/// An ordered pair of Zeeman levels, `low < high`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub low: f64,
    pub high: f64,
}

impl Pair {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        index_of(low)?;
        index_of(high)?;
        if high <= low {
            return Err(Error::InvalidPair(low, high));
        }
        Ok(Self { low, high })
    }

    pub fn indices(&self) -> (usize, usize) {
        (
            index_of(self.low).expect("validated pair"),
            index_of(self.high).expect("validated pair"),
        )
    }

    pub fn dm(&self) -> usize {
        let (l, h) = self.indices();
        h - l
    }

    pub fn validate(&self) -> Result<()> {
        Pair::new(self.low, self.high).map(|_| ())
    }
}

impl std::fmt::Display for Pair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}/2,{}/2)", (2.0 * self.low) as i32, (2.0 * self.high) as i32)
    }
}

/// Normalized pure state over the ten levels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinState {
    amps: CVec,
}

impl SpinState {
    pub fn basis(m: f64) -> Result<Self> {
        let mut amps = CVec::zeros(DIM);
        amps[index_of(m)?] = ONE;
        Ok(Self { amps })
    }

    /// Normalizes the supplied amplitudes.
    pub fn from_amplitudes(amps: &[C64]) -> Result<Self> {
        if amps.len() != DIM {
            return Err(Error::InvalidArgument(format!("expected {DIM} amplitudes, got {}", amps.len())));
        }
        let v = CVec::from_column_slice(amps);
        let n = v.norm();
        if n < 1e-300 || !n.is_finite() {
            return Err(Error::ZeroState);
        }
        Ok(Self { amps: v / C64::from(n) })
    }

    pub fn from_vector(v: CVec) -> Result<Self> {
        Self::from_amplitudes(v.as_slice())
    }

    /// Wraps a vector without renormalizing; the caller vouches for the norm.
    pub(crate) fn from_raw(amps: CVec) -> Self {
        Self { amps }
    }

    pub fn amplitudes(&self) -> &CVec {
        &self.amps
    }

    pub fn amplitude(&self, m: f64) -> Result<C64> {
        Ok(self.amps[index_of(m)?])
    }

    pub fn norm(&self) -> f64 {
        self.amps.norm()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Applies `u` without renormalization so that unitarity errors stay visible.
    pub fn apply(&self, u: &CMat) -> SpinState {
        Self { amps: u * &self.amps }
    }

    pub fn inner(&self, other: &SpinState) -> C64 {
        self.amps.dotc(&other.amps)
    }

    pub fn density(&self) -> DensityMatrix {
        DensityMatrix { mat: &self.amps * self.amps.adjoint() }
    }
}

/// Hermitian, positive, unit-trace 10x10 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    mat: CMat,
}

impl DensityMatrix {
    pub fn basis(m: f64) -> Result<Self> {
        Ok(SpinState::basis(m)?.density())
    }

    pub fn from_matrix(mat: CMat) -> Result<Self> {
        if mat.nrows() != DIM || mat.ncols() != DIM {
            return Err(Error::InvalidArgument("density matrix must be 10x10".into()));
        }
        let herm = hermiticity_error(&mat);
        if herm > 1e-10 {
            return Err(Error::NotHermitian(herm));
        }
        let tr = mat.trace();
        if (tr.re - 1.0).abs() > 1e-10 || tr.im.abs() > 1e-10 {
            return Err(Error::NotNormalized(tr.re));
        }
        let rho = Self { mat };
        let lam = rho.min_eigenvalue();
        if lam < -1e-10 {
            return Err(Error::Positivity(lam));
        }
        Ok(rho)
    }

    pub(crate) fn from_raw(mat: CMat) -> Self {
        Self { mat }
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..DIM).map(|i| self.mat[(i, i)].re).collect()
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.mat + self.mat.adjoint()) * C64::from(0.5);
        SymmetricEigen::new(h).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `<psi|rho|psi>`.
    pub fn fidelity_with(&self, psi: &SpinState) -> f64 {
        psi.amplitudes().dotc(&(&self.mat * psi.amplitudes())).re
    }

    pub fn transform(&self, u: &CMat) -> DensityMatrix {
        Self { mat: u * &self.mat * u.adjoint() }
    }
}

/// Anything exposing density-matrix elements.
pub trait Coherences {
    fn element(&self, i: usize, j: usize) -> C64;
}

impl Coherences for SpinState {
    fn element(&self, i: usize, j: usize) -> C64 {
        self.amps[i] * self.amps[j].conj()
    }
}

impl Coherences for DensityMatrix {
    fn element(&self, i: usize, j: usize) -> C64 {
        self.mat[(i, j)]
    }
}

pub fn hermiticity_error(m: &CMat) -> f64 {
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn unitarity_error(u: &CMat) -> f64 {
    let n = u.nrows();
    (u.adjoint() * u - CMat::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest entry modulus.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest singular value.
pub fn operator_norm(m: &CMat) -> f64 {
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

/// `exp(-i s H)` for Hermitian `H`, by eigendecomposition.
pub fn expm_hermitian(h: &CMat, s: f64) -> CMat {
    let herm = (h + h.adjoint()) * C64::from(0.5);
    let eig = SymmetricEigen::new(herm);
    let v = &eig.eigenvectors;
    let phases = CVec::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&e| C64::from_polar(1.0, -s * e)));
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= phases[j];
    }
    scaled * v.adjoint()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Pauli matrix embedded on one pair of levels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGenerator {
    pub pair: Pair,
    pub axis: Axis,
    pub matrix: CMat,
}

pub fn pair_generator(m_low: f64, m_high: f64, axis: Axis) -> Result<PairGenerator> {
    let pair = Pair::new(m_low, m_high)?;
    let (l, h) = pair.indices();
    let mut g = CMat::zeros(DIM, DIM);
    match axis {
        Axis::X => {
            g[(l, h)] = ONE;
            g[(h, l)] = ONE;
        }
        Axis::Y => {
            g[(l, h)] = -I;
            g[(h, l)] = I;
        }
        Axis::Z => {
            g[(l, l)] = ONE;
            g[(h, h)] = -ONE;
        }
    }
    Ok(PairGenerator { pair, axis, matrix: g })
}

impl PairGenerator {
    /// `exp(-i theta G / 2)`.
    pub fn rotation(&self, theta: f64) -> CMat {
        expm_hermitian(&self.matrix, theta / 2.0)
    }
}

/// Pair rotation `exp(-i theta sigma^axis / 2)`.
pub fn pair_rotation(pair: Pair, axis: Axis, theta: f64) -> CMat {
    pair_generator(pair.low, pair.high, axis).expect("validated pair").rotation(theta)
}

/// Spin-`f` matrices in ascending-`m` order.
pub fn spin_operators(f: f64) -> Result<(CMat, CMat, CMat)> {
    if !is_half_integer(f) || f <= 0.0 {
        return Err(Error::InvalidSpin(f));
    }
    let n = (2.0 * f).round() as usize + 1;
    let m = |i: usize| i as f64 - f;
    let mut jp = CMat::zeros(n, n);
    for i in 0..n - 1 {
        let mi = m(i);
        jp[(i + 1, i)] = C64::from((f * (f + 1.0) - mi * (mi + 1.0)).sqrt());
    }
    let jm = jp.adjoint();
    let fx = (&jp + &jm) * C64::from(0.5);
    let fy = (&jp - &jm) * C64::new(0.0, -0.5);
    let fz = CMat::from_diagonal(&CVec::from_iterator(n, (0..n).map(|i| C64::from(m(i)))));
    Ok((fx, fy, fz))
}

fn factorial(n: i64) -> f64 {
    (2..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Condon-Shortley Clebsch-Gordan coefficient `<j1 m1; j2 m2 | j m>`.
pub fn clebsch_gordan(j1: f64, m1: f64, j2: f64, m2: f64, j: f64, m: f64) -> f64 {
    let valid = [j1, m1, j2, m2, j, m].iter().all(|&x| is_half_integer(x));
    if !valid || j1 < 0.0 || j2 < 0.0 || j < 0.0 {
        return 0.0;
    }
    if (m1 + m2 - m).abs() > 1e-9 || m1.abs() > j1 + 1e-9 || m2.abs() > j2 + 1e-9 || m.abs() > j + 1e-9 {
        return 0.0;
    }
    if j < (j1 - j2).abs() - 1e-9 || j > j1 + j2 + 1e-9 {
        return 0.0;
    }
    let ri = |x: f64| x.round() as i64;
    let is_int = |x: f64| (x - x.round()).abs() < 1e-9;
    if !is_int(j1 + m1) || !is_int(j2 + m2) || !is_int(j + m) || !is_int(j1 + j2 + j) {
        return 0.0;
    }
    let a = ri(j1 + j2 - j);
    let b = ri(j1 - j2 + j);
    let c = ri(-j1 + j2 + j);
    let d = ri(j1 + j2 + j + 1.0);
    let pre = ((2.0 * j + 1.0) * factorial(a) * factorial(b) * factorial(c) / factorial(d)).sqrt();
    let pre2 = (factorial(ri(j + m))
        * factorial(ri(j - m))
        * factorial(ri(j1 - m1))
        * factorial(ri(j1 + m1))
        * factorial(ri(j2 - m2))
        * factorial(ri(j2 + m2)))
    .sqrt();
    let mut sum = 0.0;
    for k in 0..=d {
        let t = [
            k,
            a - k,
            ri(j1 - m1) - k,
            ri(j2 + m2) - k,
            ri(j - j2 + m1) + k,
            ri(j - j1 - m2) + k,
        ];
        if t.iter().any(|&x| x < 0) {
            continue;
        }
        let den: f64 = t.iter().map(|&x| factorial(x)).product();
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign / den;
    }
    pre * pre2 * sum
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n as i64) / (factorial(k as i64) * factorial((n - k) as i64))
}

/// A point on the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpherePoint {
    pub theta: f64,
    pub phi: f64,
}

impl SpherePoint {
    pub fn unit_vector(&self) -> [f64; 3] {
        [self.theta.sin() * self.phi.cos(), self.theta.sin() * self.phi.sin(), self.theta.cos()]
    }

    fn from_root(z: Option<C64>) -> Self {
        match z {
            None => Self { theta: std::f64::consts::PI, phi: 0.0 },
            Some(z) => Self { theta: 2.0 * z.norm().atan(), phi: if z.norm() == 0.0 { 0.0 } else { z.arg() } },
        }
    }

    /// Stereographic coordinate; `None` at the south pole.
    fn to_root(self) -> Option<C64> {
        let t = (self.theta / 2.0).tan();
        if !(t.is_finite()) || t > 1e12 {
            None
        } else {
            Some(C64::from_polar(t, self.phi))
        }
    }
}

/// Majorana stars of a spin-9/2 state, repeated with multiplicity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MajoranaRoots {
    pub points: Vec<SpherePoint>,
}

pub const MAJORANA_CLUSTER_TOL: f64 = 1e-8;

impl MajoranaRoots {
    /// Groups coincident stars; returns (representative, multiplicity).
    pub fn clusters(&self, tol: f64) -> Vec<(SpherePoint, usize)> {
        let mut out: Vec<(SpherePoint, usize)> = Vec::new();
        for p in &self.points {
            let v = p.unit_vector();
            let hit = out.iter_mut().find(|(q, _)| {
                let w = q.unit_vector();
                ((v[0] - w[0]).powi(2) + (v[1] - w[1]).powi(2) + (v[2] - w[2]).powi(2)).sqrt() < tol
            });
            match hit {
                Some((_, k)) => *k += 1,
                None => out.push((*p, 1)),
            }
        }
        out
    }

    /// State whose stars are these points, up to global phase.
    pub fn to_state(&self) -> Result<SpinState> {
        let n = DIM - 1;
        // poly[p] is the coefficient of z^p
        let mut poly = vec![ZERO; DIM];
        poly[0] = ONE;
        let mut degree = 0usize;
        for pt in &self.points {
            if let Some(z) = pt.to_root() {
                let mut next = vec![ZERO; DIM];
                for p in 0..=degree {
                    next[p + 1] += poly[p];
                    next[p] -= z * poly[p];
                }
                poly = next;
                degree += 1;
            }
        }
        let amps: Vec<C64> = (0..DIM)
            .map(|p| {
                let sign = if (n - p) % 2 == 0 { 1.0 } else { -1.0 };
                poly[p] * sign / binomial(n, p).sqrt()
            })
            .collect();
        SpinState::from_amplitudes(&amps)
    }
}

/// Stars from the roots of `P(z) = sum_p (-1)^(9-p) sqrt(C(9,p)) c_p z^p`,
/// mapped through `z = tan(theta/2) e^{i phi}`; missing degree becomes
/// roots at the south pole.
pub fn majorana_roots(state: &SpinState) -> Result<MajoranaRoots> {
    let n = DIM - 1;
    let a = state.amplitudes();
    if a.norm() < 1e-300 {
        return Err(Error::ZeroState);
    }
    let coef: Vec<C64> = (0..DIM)
        .map(|p| {
            let sign = if (n - p) % 2 == 0 { 1.0 } else { -1.0 };
            a[p] * sign * binomial(n, p).sqrt()
        })
        .collect();
    let scale = coef.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let degree = (0..DIM).rev().find(|&p| coef[p].norm() > 1e-13 * scale).unwrap_or(0);
    let mut roots: Vec<Option<C64>> = Vec::with_capacity(n);
    // exact zeros are deflated before the companion solve
    let low = (0..=degree).find(|&p| coef[p].norm() > 1e-13 * scale).unwrap_or(0);
    roots.extend(std::iter::repeat_n(Some(ZERO), low));
    let deg = degree - low;
    if deg > 0 {
        let lead = coef[degree];
        let mut comp = CMat::zeros(deg, deg);
        for i in 1..deg {
            comp[(i, i - 1)] = ONE;
        }
        for i in 0..deg {
            comp[(i, deg - 1)] = -coef[low + i] / lead;
        }
        let eig = Schur::try_new(comp, 1e-15, 100_000)
            .and_then(|s| s.eigenvalues())
            .ok_or_else(|| Error::InvalidArgument("companion eigenvalues did not converge".into()))?;
        roots.extend(eig.iter().map(|&z| Some(z)));
    }
    roots.extend(std::iter::repeat_n(None, n - degree));
    let mut points: Vec<SpherePoint> = roots.into_iter().map(SpherePoint::from_root).collect();
    // snap coincident stars onto a common representative
    let reps = MajoranaRoots { points: points.clone() }.clusters(MAJORANA_CLUSTER_TOL);
    for p in points.iter_mut() {
        let v = p.unit_vector();
        for (r, _) in &reps {
            let w = r.unit_vector();
            if ((v[0] - w[0]).powi(2) + (v[1] - w[1]).powi(2) + (v[2] - w[2]).powi(2)).sqrt() < MAJORANA_CLUSTER_TOL {
                *p = *r;
                break;
            }
        }
    }
    Ok(MajoranaRoots { points })
}

/// Bloch vector of the pair `(m, m+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubBlochVector {
    pub low: f64,
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl SubBlochVector {
    pub fn length(&self) -> f64 {
        (self.u * self.u + self.v * self.v + self.w * self.w).sqrt()
    }
}

/// `u = 2 Re rho(m, m+1)`, `v = 2 Im rho(m, m+1)`, `w = p_m - p_{m+1}`.
pub fn sub_bloch_vector<S: Coherences>(state: &S, m: f64) -> Result<SubBlochVector> {
    let l = index_of(m)?;
    let h = index_of(m + 1.0)?;
    let c = state.element(l, h);
    Ok(SubBlochVector {
        low: m,
        u: 2.0 * c.re,
        v: 2.0 * c.im,
        w: state.element(l, l).re - state.element(h, h).re,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn approx(a: &CMat, b: &CMat) -> f64 {
        (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn sigma_x_swaps_levels() {
        let g = pair_generator(-2.5, -1.5, Axis::X).unwrap();
        let s = SpinState::basis(-2.5).unwrap().apply(&g.matrix);
        assert!((s.amplitude(-1.5).unwrap() - ONE).norm() < 1e-15);
        assert!((s.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pi_pulse_gives_minus_i() {
        let g = pair_generator(-2.5, -1.5, Axis::X).unwrap();
        let s = SpinState::basis(-2.5).unwrap().apply(&g.rotation(PI));
        assert!((s.amplitude(-1.5).unwrap() + I).norm() < 1e-12);
        for m in projections() {
            if m != -1.5 {
                assert!(s.amplitude(m).unwrap().norm() < 1e-12);
            }
        }
        // spectator levels untouched
        let t = SpinState::basis(3.5).unwrap().apply(&g.rotation(PI));
        assert!((t.amplitude(3.5).unwrap() - ONE).norm() < 1e-12);
    }

    #[test]
    fn pauli_algebra_on_all_pairs() {
        for i in 0..DIM {
            for j in i + 1..DIM {
                let (l, h) = (projection(i), projection(j));
                let x = pair_generator(l, h, Axis::X).unwrap().matrix;
                let y = pair_generator(l, h, Axis::Y).unwrap().matrix;
                let z = pair_generator(l, h, Axis::Z).unwrap().matrix;
                assert!(approx(&commutator(&x, &y), &(&z * C64::new(0.0, 2.0))) < 1e-14);
                for g in [&x, &y, &z] {
                    assert!(hermiticity_error(g) == 0.0);
                    assert!(g.trace().norm() == 0.0);
                }
            }
        }
    }

    #[test]
    fn generator_rejects_bad_pairs() {
        assert!(pair_generator(-2.5, -2.5, Axis::X).is_err());
        assert!(pair_generator(-1.5, -2.5, Axis::X).is_err());
        assert!(pair_generator(-5.5, -2.5, Axis::X).is_err());
        assert!(pair_generator(-2.0, -1.0, Axis::X).is_err());
    }

    #[test]
    fn spin_operator_identities() {
        let (fx, fy, fz) = spin_operators(SPIN).unwrap();
        let cas = &fx * &fx + &fy * &fy + &fz * &fz;
        assert!(approx(&cas, &(CMat::identity(DIM, DIM) * C64::from(24.75))) < 1e-12);
        assert!(approx(&commutator(&fx, &fy), &(&fz * I)) < 1e-12);
        for m in projections() {
            let s = SpinState::basis(m).unwrap();
            let t = s.apply(&fz);
            assert!((t.amplitude(m).unwrap() - C64::from(m)).norm() < 1e-15);
        }
        assert!(spin_operators(1.25).is_err());
    }

    #[test]
    fn pi_rotation_about_y_flips_stretched_state() {
        let (_, fy, _) = spin_operators(SPIN).unwrap();
        // independent oracle: truncated Taylor series of exp(-i pi Fy)
        let a = &fy * C64::new(0.0, -PI);
        let mut term = CMat::identity(DIM, DIM);
        let mut sum = term.clone();
        for k in 1..120 {
            term = &term * &a / C64::from(k as f64);
            sum += &term;
        }
        let s = SpinState::basis(4.5).unwrap().apply(&sum);
        assert!((s.amplitude(-4.5).unwrap().norm() - 1.0).abs() < 1e-9);
        let e = SpinState::basis(4.5).unwrap().apply(&expm_hermitian(&fy, PI));
        assert!((e.amplitude(-4.5).unwrap() - s.amplitude(-4.5).unwrap()).norm() < 1e-9);
    }

    #[test]
    fn clebsch_gordan_basics() {
        assert!((clebsch_gordan(4.5, 4.5, 1.0, 1.0, 5.5, 5.5) - 1.0).abs() < 1e-14);
        assert_eq!(clebsch_gordan(4.5, 4.5, 1.0, 1.0, 3.5, 5.5), 0.0);
        assert_eq!(clebsch_gordan(4.5, 2.5, 1.0, 0.0, 4.5, 1.5), 0.0);
        // <1/2 1/2; 1/2 -1/2 | 0 0> = 1/sqrt 2
        assert!((clebsch_gordan(0.5, 0.5, 0.5, -0.5, 0.0, 0.0) - 0.5f64.sqrt()).abs() < 1e-14);
        assert!((clebsch_gordan(0.5, -0.5, 0.5, 0.5, 0.0, 0.0) + 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn sub_bloch_conventions() {
        let s = SpinState::basis(-2.5).unwrap();
        let b = sub_bloch_vector(&s, -2.5).unwrap();
        assert_eq!((b.u, b.v, b.w), (0.0, 0.0, 1.0));
        let r = 0.5f64.sqrt();
        let mut a = vec![ZERO; DIM];
        a[2] = C64::from(r);
        a[3] = C64::from(r);
        let b = sub_bloch_vector(&SpinState::from_amplitudes(&a).unwrap(), -2.5).unwrap();
        assert!((b.u - 1.0).abs() < 1e-15 && b.v.abs() < 1e-15 && b.w.abs() < 1e-15);
        let g = pair_generator(-2.5, -1.5, Axis::X).unwrap();
        let t = s.apply(&g.rotation(PI / 2.0));
        let b = sub_bloch_vector(&t, -2.5).unwrap();
        assert!(b.u.abs() < 1e-12 && (b.v - 1.0).abs() < 1e-12 && b.w.abs() < 1e-12);
        let bd = sub_bloch_vector(&t.density(), -2.5).unwrap();
        assert!((bd.v - b.v).abs() < 1e-15);
    }

    #[test]
    fn majorana_stretched_states() {
        let up = majorana_roots(&SpinState::basis(4.5).unwrap()).unwrap();
        assert_eq!(up.points.len(), 9);
        assert!(up.points.iter().all(|p| p.theta.abs() < 1e-12));
        assert_eq!(up.clusters(MAJORANA_CLUSTER_TOL), vec![(up.points[0], 9)]);
        let dn = majorana_roots(&SpinState::basis(-4.5).unwrap()).unwrap();
        assert!(dn.points.iter().all(|p| (p.theta - PI).abs() < 1e-12));
    }

    #[test]
    fn majorana_cat_state_on_equator() {
        let mut a = vec![ZERO; DIM];
        a[0] = ONE;
        a[9] = ONE;
        let r = majorana_roots(&SpinState::from_amplitudes(&a).unwrap()).unwrap();
        // oracle: z^9 = 1 has roots exp(2 pi i k / 9)
        let mut phis: Vec<f64> = r.points.iter().map(|p| p.phi.rem_euclid(2.0 * PI)).collect();
        phis.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (k, phi) in phis.iter().enumerate() {
            assert!((phi - 2.0 * PI * k as f64 / 9.0).abs() < 1e-9, "{phis:?}");
        }
        assert!(r.points.iter().all(|p| (p.theta - PI / 2.0).abs() < 1e-9));
    }

    #[test]
    fn majorana_roundtrip() {
        let a: Vec<C64> = (0..DIM).map(|k| C64::new((k as f64 * 0.7).sin(), (k as f64 * 1.3).cos())).collect();
        let s = SpinState::from_amplitudes(&a).unwrap();
        let back = majorana_roots(&s).unwrap().to_state().unwrap();
        assert!(s.inner(&back).norm() > 1.0 - 1e-9);
    }

    #[test]
    fn expm_matches_closed_form() {
        let g = pair_generator(-0.5, 1.5, Axis::Y).unwrap();
        let th: f64 = 0.73;
        let p = &g.matrix * &g.matrix;
        let closed = CMat::identity(DIM, DIM) + &p * C64::from((th / 2.0).cos() - 1.0) - &g.matrix * (I * (th / 2.0).sin());
        assert!(approx(&g.rotation(th), &closed) < 1e-13);
    }
}
