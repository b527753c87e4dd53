//! Decomposition of ten-level unitaries into pair rotations, and their
//! realization as Raman pulses.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{steps_propagator, steps_superoperator, Tolerances};
use crate::error::{Error, Result};
use crate::model::{Coupling, FieldParams, LindbladSpec};
use crate::sequence::{compile, rotation_pulse_with, PulseSequence};
use crate::spin_core::{operator_norm, pair_rotation, projection, unitarity_error, Axis, CMat, Pair, C64, DIM};

/// Default reconstruction tolerance.
pub const DECOMPOSE_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub pair: Pair,
    pub axis: Axis,
    pub angle: f64,
}

impl PlanStep {
    /// `exp(-i angle sigma^axis / 2)` on the pair.
    pub fn unitary(&self) -> CMat {
        pair_rotation(self.pair, self.axis, self.angle)
    }
}

/// Steps in time order: the first step acts first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationPlan {
    pub steps: Vec<PlanStep>,
    /// Operator-norm distance to the target, minimized over a global phase.
    pub error: f64,
    /// Number of Givens reductions that needed a rotation.
    pub givens: usize,
}

impl RotationPlan {
    pub fn unitary(&self) -> CMat {
        self.steps.iter().fold(CMat::identity(DIM, DIM), |u, s| s.unitary() * u)
    }

    /// Uses per generator, keyed like `x(-5/2,-3/2)`.
    pub fn generator_usage(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.steps {
            *out.entry(generator_label(s.pair, s.axis)).or_insert(0) += 1;
        }
        out
    }

    /// Levels touched by any step, as indices.
    pub fn active_levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.steps.iter().flat_map(|s| {
            let (l, h) = s.pair.indices();
            [l, h]
        }).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Leading `n` steps; the error field is NaN since there is no target.
    pub fn prefix(&self, n: usize) -> RotationPlan {
        let steps = self.steps[..n.min(self.steps.len())].to_vec();
        let mut p = RotationPlan { steps, error: 0.0, givens: 0 };
        p.error = f64::NAN;
        p
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.steps {
            s.pair.validate()?;
            let dm = s.pair.dm();
            if dm != 1 && dm != 2 {
                return Err(Error::InvalidArgument(format!("pair {:?} is not driven by the hardware", s.pair)));
            }
            if !s.angle.is_finite() {
                return Err(Error::InvalidArgument("non-finite angle".into()));
            }
        }
        Ok(())
    }
}

fn frac(m: f64) -> String {
    format!("{}/2", (2.0 * m).round() as i64)
}

pub fn generator_label(pair: Pair, axis: Axis) -> String {
    let a = match axis {
        Axis::X => "x",
        Axis::Y => "y",
        Axis::Z => "z",
    };
    format!("{a}({},{})", frac(pair.low), frac(pair.high))
}

/// Transverse generators the Raman couplings can drive: `sigma^x` on every
/// pair with `|dm|` of 1 or 2.
pub fn available_generators() -> Vec<Pair> {
    let mut out = Vec::new();
    for dm in [1, 2] {
        for l in 0..DIM - dm {
            out.push(Pair { low: projection(l), high: projection(l + dm) });
        }
    }
    out
}

/// Distance between `a` and `b` up to a global phase.
pub fn phase_insensitive_distance(a: &CMat, b: &CMat) -> f64 {
    let tr = (b.adjoint() * a).trace();
    let ph = if tr.norm() > 0.0 { tr / tr.norm() } else { C64::new(1.0, 0.0) };
    operator_norm(&(a - b * ph))
}

fn adjacent(k: usize) -> Pair {
    Pair { low: projection(k), high: projection(k + 1) }
}

/// Angles `a_k` with `prod_k exp(-i a_k sigma^z_{k,k+1} / 2) = diag(e^{i p_j})`
/// up to a global phase.
fn diagonal_to_z(phases: &[f64]) -> Vec<f64> {
    let n = phases.len();
    let mean = phases.iter().sum::<f64>() / n as f64;
    let mut a = vec![0.0; n - 1];
    // level j carries -a_j/2 + a_{j-1}/2
    let mut prev = 0.0;
    for j in 0..n - 1 {
        a[j] = prev - 2.0 * (phases[j] - mean);
        prev = a[j];
    }
    a
}

/// Givens reduction with adjacent-pair rotations, then pair z-phases for the
/// remaining diagonal.
pub fn decompose(target: &CMat, tol: f64) -> Result<RotationPlan> {
    if target.nrows() != DIM || target.ncols() != DIM {
        return Err(Error::InvalidArgument(format!("expected {DIM}x{DIM}, got {}x{}", target.nrows(), target.ncols())));
    }
    let ue = unitarity_error(target);
    if !(ue <= 1e-10) {
        return Err(Error::NotUnitary(ue));
    }
    let tiny = 1e-15;
    let mut w = target.clone();
    // each reduction is G = Rx(theta) Rz(alpha) on (r-1, r)
    let mut reductions: Vec<(Pair, f64, f64)> = Vec::new();
    for c in 0..DIM - 1 {
        for r in (c + 1..DIM).rev() {
            let u = w[(r - 1, c)];
            let v = w[(r, c)];
            if v.norm() <= tiny {
                continue;
            }
            let mut alpha = u.arg() - v.arg() + PI / 2.0;
            let mut theta = 2.0 * v.norm().atan2(u.norm());
            // keep alpha in (-pi/2, pi/2] by flipping the rotation sense
            let k = ((alpha + PI / 2.0) / PI).ceil() - 1.0;
            alpha -= k * PI;
            if (k as i64).rem_euclid(2) == 1 {
                theta = -theta;
            }
            let pair = adjacent(r - 1);
            let g = pair_rotation(pair, Axis::X, theta) * pair_rotation(pair, Axis::Z, alpha);
            w = g * w;
            reductions.push((pair, alpha, theta));
        }
    }
    let phases: Vec<f64> = (0..DIM).map(|j| w[(j, j)].arg()).collect();
    let mut steps = Vec::new();
    for (k, a) in diagonal_to_z(&phases).into_iter().enumerate() {
        let a = crate::analysis::wrap_phase(a / 2.0) * 2.0;
        if a.abs() > tiny {
            steps.push(PlanStep { pair: adjacent(k), axis: Axis::Z, angle: a });
        }
    }
    for &(pair, alpha, theta) in reductions.iter().rev() {
        if theta.abs() > tiny {
            steps.push(PlanStep { pair, axis: Axis::X, angle: -theta });
        }
        if alpha.abs() > tiny {
            steps.push(PlanStep { pair, axis: Axis::Z, angle: -alpha });
        }
    }
    let mut plan = RotationPlan { steps, error: 0.0, givens: reductions.len() };
    plan.error = phase_insensitive_distance(&plan.unitary(), target);
    if !(plan.error <= tol) {
        return Err(Error::Tolerance(format!("reconstruction error {} above {tol}", plan.error)));
    }
    Ok(plan)
}

/// Haar-distributed unitary from the QR decomposition of a complex Ginibre matrix.
pub fn haar_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMat {
    let z = DMatrix::from_fn(n, n, |_, _| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let qr = z.qr();
    let (q, r) = (qr.q(), qr.r());
    let d = CMat::from_diagonal(&nalgebra::DVector::from_fn(n, |i, _| {
        let x = r[(i, i)];
        if x.norm() > 0.0 {
            x / x.norm()
        } else {
            C64::new(1.0, 0.0)
        }
    }));
    q * d
}

/// Pulse realization of `plan`. Tone phases absorb the frame phases built up
/// by earlier pulses and a final set of z-phases removes the rest, so that
/// without off-resonant couplings the sequence equals the plan unitary.
pub fn lower_plan(plan: &RotationPlan, fields: &FieldParams, omega: f64, coupling: Coupling) -> Result<PulseSequence> {
    plan.validate()?;
    let shifts = fields.shifts(1.0);
    let e = shifts.energies();
    let mut acc = [0.0; DIM];
    let mut seq = PulseSequence::new(fields.clone());
    for s in &plan.steps {
        match s.axis {
            Axis::Z => {
                seq.push_z(s.pair, s.angle);
            }
            Axis::X | Axis::Y => {
                let base = if s.axis == Axis::X { 0.0 } else { -PI / 2.0 };
                let (l, h) = s.pair.indices();
                let seg = rotation_pulse_with(s.pair, omega, s.angle, base + acc[h] - acc[l], coupling, fields)?;
                let delta = shifts.resonance(s.pair);
                for (m, a) in acc.iter_mut().enumerate() {
                    *a += 2.0 * PI * (e[m] + delta * projection(m)) * seg.duration;
                }
                seq.push(seg);
            }
        }
    }
    // remaining frame phases diag(e^{-i acc}) are undone by diag(e^{+i acc})
    for (k, a) in diagonal_to_z(&acc).into_iter().enumerate() {
        let a = crate::analysis::wrap_phase(a / 2.0) * 2.0;
        if a != 0.0 {
            seq.push_z(adjacent(k), a);
        }
    }
    Ok(seq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFidelity {
    /// Average gate fidelity on the levels the plan touches.
    pub average: f64,
    pub entanglement: f64,
    pub dimension: usize,
    /// Population outside the active levels after starting from their maximally mixed state.
    pub leakage: f64,
}

/// Simulates the lowered plan and compares with the ideal plan unitary on the
/// active levels; population leaving them counts as error.
pub fn simulate_plan(plan: &RotationPlan, fields: &FieldParams, lindblad: &LindbladSpec, omega: f64, coupling: Coupling, tol: &Tolerances) -> Result<PlanFidelity> {
    let seq = lower_plan(plan, fields, omega, coupling)?;
    let compiled = compile(&seq)?;
    let ideal = plan.unitary();
    let active = plan.active_levels();
    let d = active.len();
    if d == 0 {
        return Ok(PlanFidelity { average: 1.0, entanglement: 1.0, dimension: 0, leakage: 0.0 });
    }
    let n = DIM;
    // column-stacked superoperator
    let sop = if lindblad.is_empty() {
        let u = steps_propagator(&compiled.steps, tol)?;
        u.map(|z| z.conj()).kronecker(&u)
    } else {
        steps_superoperator(&compiled.steps, lindblad, tol)?
    };
    let apply = |i: usize, j: usize| -> CMat {
        // vec(|i><j|) is the unit vector at i + n j
        let col = sop.column(i + n * j);
        CMat::from_column_slice(n, n, col.as_slice())
    };
    let mut fe = C64::new(0.0, 0.0);
    let mut leak = 0.0;
    for &i in &active {
        for &j in &active {
            let out = apply(i, j);
            let back = ideal.adjoint() * &out * &ideal;
            fe += back[(i, j)];
            if i == j {
                leak += (0..n).filter(|k| !active.contains(k)).map(|k| out[(k, k)].re).sum::<f64>() / d as f64;
            }
        }
    }
    let fe = fe.re / (d * d) as f64;
    Ok(PlanFidelity { average: (d as f64 * fe + 1.0) / (d as f64 + 1.0), entanglement: fe, dimension: d, leakage: leak })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_gives_empty_plan() {
        let p = decompose(&CMat::identity(DIM, DIM), DECOMPOSE_TOL).unwrap();
        assert!(p.steps.is_empty());
    }

    #[test]
    fn single_rotation_gives_single_step() {
        let pair = Pair::new(-1.5, -0.5).unwrap();
        let p = decompose(&pair_rotation(pair, Axis::X, 0.7), DECOMPOSE_TOL).unwrap();
        assert_eq!(p.steps.len(), 1, "{:?}", p.steps);
        assert_eq!(p.steps[0].pair, pair);
        assert!((p.steps[0].angle - 0.7).abs() < 1e-12);
    }

    #[test]
    fn generator_count() {
        let g = available_generators();
        assert_eq!(g.len(), 17);
        assert!(g.iter().all(|p| p.dm() == 1 || p.dm() == 2));
    }

    #[test]
    fn haar_plan_is_short_and_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = haar_unitary(DIM, &mut rng);
        assert!(unitarity_error(&u) < 1e-12);
        let p = decompose(&u, DECOMPOSE_TOL).unwrap();
        assert!(p.givens <= 45);
        assert!(p.steps.len() <= 2 * 45 + 9);
        assert!(p.steps.iter().all(|s| s.pair.dm() == 1));
    }

    #[test]
    fn non_unitary_rejected() {
        let mut u = CMat::identity(DIM, DIM);
        u[(0, 0)] = C64::new(1.1, 0.0);
        assert!(decompose(&u, DECOMPOSE_TOL).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = decompose(&haar_unitary(DIM, &mut rng), DECOMPOSE_TOL).unwrap();
        let back: RotationPlan = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
