//! Detection efficiencies, projection-noise sampling and the ancilla-mapped
//! collective observables.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin_core::{index_of, projection, unitarity_error, CMat, C64, DIM, I};

/// Qubit and ancilla levels of the mapped measurement.
pub const UP: f64 = -2.5;
pub const DOWN: f64 = -3.5;
pub const ANCILLA_A: f64 = -1.5;
pub const ANCILLA_B: f64 = -4.5;

/// Largest fractional increase applied when recalibrating an efficiency.
pub const MAX_RECALIBRATION: f64 = 0.06;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionModel {
    /// Per-level efficiency, index 0 is `m = -9/2`.
    pub efficiency: [f64; DIM],
    /// Groups of levels readable in one realization; empty means all.
    #[serde(default)]
    pub groups: Vec<Vec<f64>>,
    #[serde(default)]
    pub recalibrate: bool,
    /// Gaussian read noise on fractional populations.
    #[serde(default)]
    pub read_noise: f64,
}

impl DetectionModel {
    pub fn ideal() -> Self {
        Self { efficiency: [1.0; DIM], groups: vec![], recalibrate: false, read_noise: 0.0 }
    }

    /// Calibrated efficiencies of the strontium setup; `-7/2` and `-3/2` read
    /// together, `-5/2` in separate runs, `-9/2` not at all.
    pub fn strontium() -> Self {
        let mut efficiency = [1.0; DIM];
        efficiency[index_of(-3.5).unwrap()] = 0.65;
        efficiency[index_of(-2.5).unwrap()] = 0.70;
        efficiency[index_of(-1.5).unwrap()] = 0.51;
        efficiency[index_of(-4.5).unwrap()] = 0.0;
        Self { efficiency, groups: vec![vec![-3.5, -1.5], vec![-2.5]], recalibrate: true, read_noise: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for &e in &self.efficiency {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidArgument(format!("efficiency {e} outside [0, 1]")));
            }
        }
        for g in &self.groups {
            for &m in g {
                index_of(m)?;
            }
        }
        if !(self.read_noise >= 0.0) {
            return Err(Error::InvalidArgument("read noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Levels that can be read together with `m`, or `None` if `m` is unreadable.
    pub fn group_of(&self, m: f64) -> Option<Vec<f64>> {
        let i = index_of(m).ok()?;
        if self.efficiency[i] == 0.0 {
            return None;
        }
        if self.groups.is_empty() {
            return Some((0..DIM).map(projection).filter(|&x| self.efficiency[index_of(x).unwrap()] > 0.0).collect());
        }
        self.groups.iter().find(|g| g.contains(&m)).cloned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub shot: u64,
    pub n_atoms: u64,
    pub true_counts: [u64; DIM],
    pub detected: [u64; DIM],
}

/// Populations from a state vector or density matrix diagonal.
fn checked_populations(pops: &[f64]) -> Result<[f64; DIM]> {
    if pops.len() != DIM {
        return Err(Error::InvalidArgument(format!("expected {DIM} populations, got {}", pops.len())));
    }
    let total: f64 = pops.iter().sum();
    if (total - 1.0).abs() > 1e-6 || pops.iter().any(|&p| p < -1e-9) {
        return Err(Error::NotNormalized(total));
    }
    let mut out = [0.0; DIM];
    for (o, &p) in out.iter_mut().zip(pops) {
        *o = p.max(0.0);
    }
    Ok(out)
}

/// Multinomial draw of `n` atoms over `probs` by sequential binomials.
pub fn multinomial<R: Rng + ?Sized>(n: u64, probs: &[f64; DIM], rng: &mut R) -> [u64; DIM] {
    let mut counts = [0u64; DIM];
    let mut left = n;
    let mut mass = 1.0;
    for k in 0..DIM {
        if left == 0 {
            break;
        }
        if k == DIM - 1 {
            counts[k] = left;
            break;
        }
        let p = if mass > 0.0 { (probs[k] / mass).clamp(0.0, 1.0) } else { 0.0 };
        let c = Binomial::new(left, p).expect("valid binomial").sample(rng);
        counts[k] = c;
        left -= c;
        mass -= probs[k];
    }
    counts
}

pub fn sample_shot<R: Rng + ?Sized>(pops: &[f64], n_atoms: u64, det: &DetectionModel, shot: u64, rng: &mut R) -> Result<ShotRecord> {
    if n_atoms == 0 {
        return Err(Error::InvalidArgument("need at least one atom".into()));
    }
    let p = checked_populations(pops)?;
    let true_counts = multinomial(n_atoms, &p, rng);
    let mut detected = [0u64; DIM];
    for k in 0..DIM {
        let e = det.efficiency[k];
        detected[k] = if e >= 1.0 {
            true_counts[k]
        } else if e <= 0.0 {
            0
        } else {
            Binomial::new(true_counts[k], e).expect("valid binomial").sample(rng)
        };
    }
    Ok(ShotRecord { shot, n_atoms, true_counts, detected })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    /// Estimated fraction of `N_at` per level; `NaN` where unreadable.
    pub values: [f64; DIM],
    pub efficiency: [f64; DIM],
    pub recalibrated: bool,
}

/// Fractional populations relative to the known atom number, with optional
/// read noise and recalibration of efficiencies that push a level above 1.
pub fn fractional_populations<R: Rng + ?Sized>(shot: &ShotRecord, det: &DetectionModel, rng: &mut R) -> Fractions {
    let mut eff = det.efficiency;
    let mut values = [f64::NAN; DIM];
    let noise = (det.read_noise > 0.0).then(|| Normal::new(0.0, det.read_noise).unwrap());
    for k in 0..DIM {
        if eff[k] > 0.0 {
            let mut v = shot.detected[k] as f64 / (eff[k] * shot.n_atoms as f64);
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            values[k] = v;
        }
    }
    let mut recalibrated = false;
    if det.recalibrate {
        for k in 0..DIM {
            if values[k].is_finite() && values[k] > 1.0 {
                let factor = values[k].min(1.0 + MAX_RECALIBRATION);
                eff[k] *= factor;
                values[k] /= factor;
                recalibrated = true;
            }
        }
    }
    Fractions { values, efficiency: eff, recalibrated }
}

/// Single-particle representatives `U^dag (P_a - P_b) U` and `U^dag (P_up - P_down) U`.
pub fn collective_operators(u: &CMat) -> Result<(CMat, CMat)> {
    let err = unitarity_error(u);
    if err > 1e-8 {
        return Err(Error::NotUnitary(err));
    }
    let diff = |p: f64, m: f64| {
        let mut d = CMat::zeros(DIM, DIM);
        d[(index_of(p).unwrap(), index_of(p).unwrap())] = C64::new(1.0, 0.0);
        d[(index_of(m).unwrap(), index_of(m).unwrap())] = C64::new(-1.0, 0.0);
        d
    };
    let ud = u.adjoint();
    Ok((&ud * diff(ANCILLA_A, ANCILLA_B) * u, &ud * diff(UP, DOWN) * u))
}

/// Pseudo-spin operators on the `(up, down)` qubit, `up` first.
pub fn qubit_spin() -> [CMat; 3] {
    let (u, d) = (index_of(UP).unwrap(), index_of(DOWN).unwrap());
    let mut sx = CMat::zeros(DIM, DIM);
    let mut sy = CMat::zeros(DIM, DIM);
    let mut sz = CMat::zeros(DIM, DIM);
    sx[(u, d)] = C64::new(0.5, 0.0);
    sx[(d, u)] = C64::new(0.5, 0.0);
    sy[(u, d)] = -I * 0.5;
    sy[(d, u)] = I * 0.5;
    sz[(u, u)] = C64::new(0.5, 0.0);
    sz[(d, d)] = C64::new(-0.5, 0.0);
    [sx, sy, sz]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// `N_a - N_b` and `N_up - N_down` from all four levels.
    FourState,
    /// From `-3/2` and `-7/2` only, assuming each mapped pair holds `N_at / 2`.
    TwoState,
}

/// Counts corrected for efficiency; unreadable levels are missing.
fn corrected(shot: &ShotRecord, det: &DetectionModel, m: f64) -> Result<f64> {
    let k = index_of(m)?;
    let e = det.efficiency[k];
    if e <= 0.0 {
        return Err(Error::InvalidArgument(format!("level {m} is not readable")));
    }
    Ok(shot.detected[k] as f64 / e)
}

/// Returns `(s^z, s^phi)` estimates in atom units.
pub fn estimate_spin_projections(shot: &ShotRecord, det: &DetectionModel, mode: EstimatorMode) -> Result<(f64, f64)> {
    let n = shot.n_atoms as f64;
    match mode {
        EstimatorMode::FourState => {
            let na = corrected(shot, det, ANCILLA_A)?;
            let nb = corrected(shot, det, ANCILLA_B)?;
            let nu = corrected(shot, det, UP)?;
            let nd = corrected(shot, det, DOWN)?;
            Ok((na - nb, nu - nd))
        }
        EstimatorMode::TwoState => {
            let na = corrected(shot, det, ANCILLA_A)?;
            let nd = corrected(shot, det, DOWN)?;
            Ok((2.0 * na - n / 2.0, -(2.0 * nd - n / 2.0)))
        }
    }
}

/// Sample mean, variance and the standard error of the variance.
pub fn variance_with_error(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    let se = ((m4 - m2 * m2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt();
    (mean, var, se)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n_atoms: u64,
    pub n_shots: usize,
    /// `(variance, standard error)` pairs in atom units squared.
    pub o_z: (f64, f64),
    pub o_y: (f64, f64),
    pub s_z: (f64, f64),
    pub s_y: (f64, f64),
}

impl VarianceReport {
    /// Largest deviation from `Var(O) = Var(s) + N/4` in combined standard errors.
    pub fn max_pull(&self) -> f64 {
        let q = self.n_atoms as f64 / 4.0;
        let pull = |o: (f64, f64), s: (f64, f64)| (o.0 - s.0 - q).abs() / (o.1 * o.1 + s.1 * s.1).sqrt();
        pull(self.o_z, self.s_z).max(pull(self.o_y, self.s_y))
    }
}

/// Monte-Carlo check of the variance identity for a product state of
/// `n_atoms` copies of `psi` (populated only on the qubit).
pub fn variance_check<R: Rng + ?Sized>(psi: &crate::spin_core::SpinState, u: &CMat, n_atoms: u64, n_shots: usize, rng: &mut R) -> Result<VarianceReport> {
    let (up, down) = (index_of(UP).unwrap(), index_of(DOWN).unwrap());
    let a = psi.amplitudes();
    let outside: f64 = (0..DIM).filter(|&k| k != up && k != down).map(|k| a[k].norm_sqr()).sum();
    if outside > 1e-12 {
        return Err(Error::InvalidArgument("input must live on the qubit levels".into()));
    }
    let after = psi.apply(u);
    let p_meas = checked_populations(&after.populations())?;
    // projective readout of s^z and s^y on the bare input
    let pz = {
        let mut p = [0.0; DIM];
        p[up] = a[up].norm_sqr();
        p[down] = a[down].norm_sqr();
        p
    };
    let py = {
        // eigenbasis of s^y: (|up> +- i|down>)/sqrt2
        let plus = (a[up] - I * a[down]).norm_sqr() / 2.0;
        let mut p = [0.0; DIM];
        p[up] = plus;
        p[down] = 1.0 - plus;
        p
    };
    let (ia, ib) = (index_of(ANCILLA_A).unwrap(), index_of(ANCILLA_B).unwrap());
    let mut oz = Vec::with_capacity(n_shots);
    let mut oy = Vec::with_capacity(n_shots);
    let mut sz = Vec::with_capacity(n_shots);
    let mut sy = Vec::with_capacity(n_shots);
    for _ in 0..n_shots {
        let c = multinomial(n_atoms, &p_meas, rng);
        oz.push(c[ia] as f64 - c[ib] as f64);
        oy.push(c[up] as f64 - c[down] as f64);
        let z = multinomial(n_atoms, &pz, rng);
        sz.push(0.5 * (z[up] as f64 - z[down] as f64));
        let y = multinomial(n_atoms, &py, rng);
        sy.push(0.5 * (y[up] as f64 - y[down] as f64));
    }
    let v = |x: &[f64]| {
        let (_, var, se) = variance_with_error(x);
        (var, se)
    };
    Ok(VarianceReport { n_atoms, n_shots, o_z: v(&oz), o_y: v(&oy), s_z: v(&sz), s_y: v(&sy) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin_core::{pair_rotation, Axis, Pair, SpinState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn pops_of(m: f64) -> Vec<f64> {
        SpinState::basis(m).unwrap().populations()
    }

    #[test]
    fn pure_level_has_no_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in 0..20 {
            let r = sample_shot(&pops_of(-2.5), 500, &DetectionModel::ideal(), s, &mut rng).unwrap();
            assert_eq!(r.true_counts[index_of(-2.5).unwrap()], 500);
            assert_eq!(r.detected, r.true_counts);
        }
    }

    #[test]
    fn unnormalized_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = pops_of(-2.5);
        p[0] = 0.5;
        assert!(sample_shot(&p, 10, &DetectionModel::ideal(), 0, &mut rng).is_err());
    }

    #[test]
    fn thinning_scales_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let det = DetectionModel::strontium();
        let k = index_of(-1.5).unwrap();
        let n = 4000;
        let mean: f64 = (0..n).map(|s| sample_shot(&pops_of(-1.5), 1000, &det, s, &mut rng).unwrap().detected[k] as f64).sum::<f64>() / n as f64;
        // binomial standard error of the mean is about 0.25
        assert!((mean - 510.0).abs() < 1.5, "{mean}");
    }

    #[test]
    fn recalibration_is_capped() {
        let det = DetectionModel::strontium();
        let k = index_of(-1.5).unwrap();
        let mut shot = ShotRecord { shot: 0, n_atoms: 1000, true_counts: [0; DIM], detected: [0; DIM] };
        shot.detected[k] = 530;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = fractional_populations(&shot, &det, &mut rng);
        assert!(f.recalibrated);
        assert!((f.values[k] - 1.0).abs() < 1e-12);
        assert!(f.efficiency[k] <= 0.51 * 1.06 + 1e-12);
        shot.detected[k] = 600;
        let f = fractional_populations(&shot, &det, &mut rng);
        assert!((f.efficiency[k] - 0.51 * 1.06).abs() < 1e-12);
        assert!(f.values[k] > 1.0);
    }

    #[test]
    fn identity_propagator_operators() {
        let (oz, oy) = collective_operators(&CMat::identity(DIM, DIM)).unwrap();
        assert_eq!(oz[(index_of(ANCILLA_A).unwrap(), index_of(ANCILLA_A).unwrap())], C64::new(1.0, 0.0));
        assert_eq!(oz[(index_of(ANCILLA_B).unwrap(), index_of(ANCILLA_B).unwrap())], C64::new(-1.0, 0.0));
        assert_eq!(oy[(index_of(UP).unwrap(), index_of(UP).unwrap())], C64::new(1.0, 0.0));
        assert!(collective_operators(&(CMat::identity(DIM, DIM) * C64::new(2.0, 0.0))).is_err());
    }

    #[test]
    fn all_atoms_in_ancilla_a() {
        let det = DetectionModel::ideal();
        let mut shot = ShotRecord { shot: 0, n_atoms: 800, true_counts: [0; DIM], detected: [0; DIM] };
        shot.detected[index_of(ANCILLA_A).unwrap()] = 400;
        shot.detected[index_of(UP).unwrap()] = 400;
        let (sz, _) = estimate_spin_projections(&shot, &det, EstimatorMode::TwoState).unwrap();
        assert_eq!(sz, 400.0);
        assert!(estimate_spin_projections(&shot, &DetectionModel::strontium(), EstimatorMode::FourState).is_err());
    }

    #[test]
    fn eigenstate_variance_is_additive_term() {
        let u = pair_rotation(Pair::new(DOWN, UP).unwrap(), Axis::X, PI / 2.0)
            * pair_rotation(Pair::new(ANCILLA_B, DOWN).unwrap(), Axis::X, PI / 2.0)
            * pair_rotation(Pair::new(UP, ANCILLA_A).unwrap(), Axis::X, PI / 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = variance_check(&SpinState::basis(UP).unwrap(), &u, 1000, 4000, &mut rng).unwrap();
        assert_eq!(r.s_z.0, 0.0);
        assert!((r.o_z.0 - 250.0).abs() < 3.0 * r.o_z.1, "{:?}", r.o_z);
    }
}
