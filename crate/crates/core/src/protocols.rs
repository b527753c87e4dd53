//! Experiment recipes: Rabi scans, Ramsey interferometers (single and two in
//! parallel), the ancilla-mapped measurement and its leakage scan, together
//! with the shot-level noise model.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Tolerances;
use crate::error::{Error, Result};
use crate::model::{inhomogeneous_dephasing, photon_scattering_channels, Coupling, DephasingScaling, Detuning, FieldParams, LindbladSpec, ScatteringConfig};
use crate::readout::{sample_shot, DetectionModel, ShotRecord, ANCILLA_A, ANCILLA_B, DOWN, UP};
use crate::sequence::{rotation_pulse_with, run, Engine, Item, PulseSegment, PulseSequence};
use crate::spin_core::{expm_hermitian, index_of, pair_generator, Axis, Pair, SpinState, C64, DIM, I};

/// Default per-pulse area jitter (rad).
pub const PULSE_AREA_SIGMA: f64 = 0.063;
/// Relative spread of the light-shift intensity seen by the atoms.
pub const TLS_INHOMOGENEITY: f64 = 0.0032;
pub const TLS_RAMP: f64 = 0.002;
pub const DUAL_GAP: f64 = 1e-4;
pub const DUAL_WINDOW_DETUNING: f64 = 1.0;
pub const ANCILLA_WINDOW: f64 = 0.51e-3;

fn default_area_sigma() -> f64 {
    PULSE_AREA_SIGMA
}

/// `Var(phi) = floor + d * T`, `d` in rad^2/s.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseDiffusion {
    pub floor: f64,
    pub d: f64,
}

impl PhaseDiffusion {
    pub fn variance(&self, t: f64) -> f64 {
        self.floor + self.d * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BToggle {
    pub probability: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Absolute pulse-area jitter (rad).
    #[serde(default = "default_area_sigma")]
    pub pulse_area_sigma: f64,
    /// Fractional pulse-area jitter.
    #[serde(default)]
    pub pulse_area_fraction: f64,
    /// Interferometer phase noise with the light shift on.
    #[serde(default)]
    pub phase_tls_on: PhaseDiffusion,
    /// Interferometer phase noise with the light shift ramped off.
    #[serde(default)]
    pub phase_tls_off: PhaseDiffusion,
    #[serde(default)]
    pub b_sigma: f64,
    #[serde(default)]
    pub q_sigma: f64,
    #[serde(default)]
    pub b_toggle: Option<BToggle>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { pulse_area_sigma: PULSE_AREA_SIGMA, ..Self::none() }
    }
}

const MAX_PULSES: usize = 8;

/// Standard normal draws for one shot, scaled by [`NoiseSpec`] when used.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotDraw {
    pub b_shift: f64,
    pub q_shift: f64,
    area_abs: [f64; MAX_PULSES],
    area_frac: [f64; MAX_PULSES],
    phase: [f64; 2],
}

impl ShotDraw {
    pub fn quiet() -> Self {
        Self { b_shift: 0.0, q_shift: 0.0, area_abs: [0.0; MAX_PULSES], area_frac: [0.0; MAX_PULSES], phase: [0.0; 2] }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            pulse_area_sigma: 0.0,
            pulse_area_fraction: 0.0,
            phase_tls_on: PhaseDiffusion::default(),
            phase_tls_off: PhaseDiffusion::default(),
            b_sigma: 0.0,
            q_sigma: 0.0,
            b_toggle: None,
        }
    }

    pub fn is_quiet(&self) -> bool {
        self.pulse_area_sigma == 0.0
            && self.pulse_area_fraction == 0.0
            && self.phase_tls_on == PhaseDiffusion::default()
            && self.phase_tls_off == PhaseDiffusion::default()
            && self.b_sigma == 0.0
            && self.q_sigma == 0.0
            && self.b_toggle.is_none_or(|t| t.probability == 0.0 || t.offset == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.pulse_area_sigma,
            self.pulse_area_fraction,
            self.phase_tls_on.floor,
            self.phase_tls_on.d,
            self.phase_tls_off.floor,
            self.phase_tls_off.d,
            self.b_sigma,
            self.q_sigma,
        ];
        if vals.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("noise parameters must be finite and >= 0".into()));
        }
        if let Some(t) = self.b_toggle {
            if !(0.0..=1.0).contains(&t.probability) || !t.offset.is_finite() {
                return Err(Error::InvalidArgument("toggle probability must be in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ShotDraw {
        let mut d = ShotDraw::quiet();
        let z = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
        d.b_shift = self.b_sigma * z(rng);
        d.q_shift = self.q_sigma * z(rng);
        if let Some(t) = self.b_toggle {
            if rng.random::<f64>() < t.probability {
                d.b_shift += t.offset;
            }
        }
        for k in 0..MAX_PULSES {
            d.area_abs[k] = z(rng);
            d.area_frac[k] = z(rng);
        }
        d.phase = [z(rng), z(rng)];
        d
    }

    /// Multiplier on the Rabi frequency of pulse `k` with nominal area `theta`.
    pub fn area_factor(&self, draw: &ShotDraw, k: usize, theta: f64) -> f64 {
        let k = k % MAX_PULSES;
        let area = theta.abs() * (1.0 + self.pulse_area_fraction * draw.area_frac[k]) + self.pulse_area_sigma * draw.area_abs[k];
        (area / theta.abs()).max(0.0)
    }

    /// Phase kick of interferometer `k` for an open time `t`.
    pub fn phase_kick(&self, draw: &ShotDraw, k: usize, t: f64, tls_on: bool) -> f64 {
        let m = if tls_on { self.phase_tls_on } else { self.phase_tls_off };
        m.variance(t).max(0.0).sqrt() * draw.phase[k % 2]
    }

    pub fn shot_fields(&self, fields: &FieldParams, draw: &ShotDraw) -> FieldParams {
        let mut f = fields.clone();
        f.b += draw.b_shift;
        f.q += draw.q_shift;
        f
    }
}

/// Which dissipative channels are active.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dissipation {
    #[serde(default)]
    pub scattering: Option<ScatteringConfig>,
    #[serde(default)]
    pub dephasing: Option<DephasingScaling>,
}

impl Dissipation {
    pub fn none() -> Self {
        Self::default()
    }

    /// Photon scattering with the amplified-emission factor plus empirical dephasing.
    pub fn strontium() -> Self {
        Self { scattering: Some(ScatteringConfig::nominal()), dephasing: Some(DephasingScaling::TimeProportional) }
    }

    pub fn scattering_only() -> Self {
        Self { scattering: Some(ScatteringConfig::nominal()), dephasing: None }
    }

    pub fn monochromatic_scattering() -> Self {
        Self { scattering: Some(ScatteringConfig::monochromatic()), dephasing: None }
    }

    pub fn build(&self) -> Result<LindbladSpec> {
        let mut spec = LindbladSpec::empty();
        if let Some(s) = &self.scattering {
            spec = spec.merged(photon_scattering_channels(s)?);
        }
        if let Some(d) = self.dephasing {
            spec = spec.merged(inhomogeneous_dephasing(d));
        }
        Ok(spec)
    }
}

/// Static spread of the light-shift intensity across the cloud, averaged by
/// Gauss-Hermite quadrature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inhomogeneity {
    #[serde(default)]
    pub tls_sigma: f64,
    #[serde(default = "one_node")]
    pub nodes: usize,
}

fn one_node() -> usize {
    1
}

impl Default for Inhomogeneity {
    fn default() -> Self {
        Self { tls_sigma: 0.0, nodes: 1 }
    }
}

impl Inhomogeneity {
    pub fn strontium() -> Self {
        Self { tls_sigma: TLS_INHOMOGENEITY, nodes: 15 }
    }

    /// `(epsilon, weight)` pairs; weights sum to one.
    pub fn quadrature(&self) -> Vec<(f64, f64)> {
        if self.tls_sigma == 0.0 || self.nodes <= 1 {
            return vec![(0.0, 1.0)];
        }
        gauss_hermite(self.nodes).into_iter().map(|(x, w)| (self.tls_sigma * x, w)).collect()
    }
}

/// Nodes and weights for a standard normal weight (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut out: Vec<(f64, f64)> = (0..n).map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2))).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub fields: FieldParams,
    #[serde(default)]
    pub dissipation: Dissipation,
    #[serde(default)]
    pub inhomogeneity: Inhomogeneity,
}

impl Model {
    pub fn coherent(fields: FieldParams) -> Self {
        Self { fields, dissipation: Dissipation::none(), inhomogeneity: Inhomogeneity::default() }
    }

    pub fn strontium(fields: FieldParams) -> Self {
        Self { fields, dissipation: Dissipation::strontium(), inhomogeneity: Inhomogeneity::strontium() }
    }
}

/// Ensemble-averaged populations of `seq` at `samples` (the end point last).
pub fn simulate(seq: &PulseSequence, initial: &SpinState, model: &Model, lindblad: &LindbladSpec, tol: &Tolerances, samples: &[f64]) -> Result<Vec<[f64; DIM]>> {
    let engine = if lindblad.is_empty() { Engine::Pure } else { Engine::Density };
    let quad = model.inhomogeneity.quadrature();
    let base = if quad.len() > 1 { seq.freeze_detunings() } else { seq.clone() };
    let runs: Vec<Result<Vec<Vec<f64>>>> = quad
        .par_iter()
        .map(|&(eps, _)| {
            let mut s = base.clone();
            if eps != 0.0 {
                s.fields.q *= 1.0 + eps;
                s.fields.b_vector *= 1.0 + eps;
                let amp = (1.0 + eps).max(0.0).sqrt();
                for it in s.items.iter_mut() {
                    if let Item::Segment(seg) = it {
                        for t in seg.tones.iter_mut() {
                            t.omega *= amp;
                        }
                    }
                }
            }
            let out = run(&s, initial, engine, lindblad, tol, samples)?;
            let times = out.times().to_vec();
            let pops = out.populations();
            // keep the rows at the requested sample times plus the end
            let mut rows = Vec::with_capacity(samples.len() + 1);
            let mut k = 0;
            for &ts in samples {
                while k + 1 < times.len() && times[k] < ts - 1e-15 {
                    k += 1;
                }
                rows.push(pops[k].clone());
            }
            rows.push(pops.last().unwrap().clone());
            Ok(rows)
        })
        .collect();
    let mut acc: Vec<[f64; DIM]> = vec![[0.0; DIM]; samples.len() + 1];
    for (r, &(_, w)) in runs.into_iter().zip(&quad) {
        let rows = r?;
        for (a, row) in acc.iter_mut().zip(rows) {
            for k in 0..DIM {
                a[k] += w * row[k];
            }
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[serde(default = "one_shot")]
    pub n_shots: usize,
    /// Atom number for projection-noise sampling; no sampling when absent.
    #[serde(default)]
    pub n_atoms: Option<u64>,
    #[serde(default = "DetectionModel::ideal")]
    pub detection: DetectionModel,
    #[serde(default)]
    pub seed: u64,
}

fn one_shot() -> usize {
    1
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { n_shots: 1, n_atoms: None, detection: DetectionModel::ideal(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferometerResult {
    pub scan_name: String,
    pub scan: Vec<f64>,
    /// Expected populations before sampling, `[point][shot]`.
    pub populations: Vec<Vec<[f64; DIM]>>,
    /// Sampled shots, `[point][shot]`; empty without an atom number.
    pub shots: Vec<Vec<ShotRecord>>,
    /// Nominal interferometer phases per point (rad), where defined.
    pub phases: Vec<[f64; 2]>,
    /// Mean oscillator rate per unit `m` while each interferometer is open (Hz).
    pub mean_detuning: Vec<[f64; 2]>,
}

impl InterferometerResult {
    pub fn mean_populations(&self) -> Vec<[f64; DIM]> {
        self.populations
            .iter()
            .map(|shots| {
                let mut m = [0.0; DIM];
                for s in shots {
                    for k in 0..DIM {
                        m[k] += s[k] / shots.len() as f64;
                    }
                }
                m
            })
            .collect()
    }

    /// Mean population of level `m` versus the scan variable.
    pub fn level(&self, m: f64) -> Result<Vec<f64>> {
        let k = index_of(m)?;
        Ok(self.mean_populations().iter().map(|p| p[k]).collect())
    }
}

fn rng_for(seed: u64, purpose: u64, point: usize, shot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((point as u64) << 32) | shot as u64);
    rng
}

const NOISE_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;

/// Runs `build` for every scan point and shot and samples atom counts.
fn scan<F>(name: &str, points: &[f64], model: &Model, noise: &NoiseSpec, settings: &RunSettings, tol: &Tolerances, build: F) -> Result<InterferometerResult>
where
    F: Fn(usize, &FieldParams, &ShotDraw) -> Result<(PulseSequence, SpinState)> + Sync,
{
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty scan".into()));
    }
    if settings.n_shots == 0 {
        return Err(Error::InvalidArgument("need at least one shot".into()));
    }
    noise.validate()?;
    settings.detection.validate()?;
    let lindblad = model.dissipation.build()?;
    let quiet = noise.is_quiet();
    let shots_to_run = if quiet { 1 } else { settings.n_shots };
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..shots_to_run).map(move |s| (p, s))).collect();
    let results: Vec<Result<[f64; DIM]>> = jobs
        .par_iter()
        .map(|&(p, s)| {
            let draw = if quiet { ShotDraw::quiet() } else { noise.draw(&mut rng_for(settings.seed, NOISE_STREAM, p, s)) };
            let fields = noise.shot_fields(&model.fields, &draw);
            let (seq, init) = build(p, &fields, &draw)?;
            let rows = simulate(&seq, &init, model, &lindblad, tol, &[])?;
            Ok(*rows.last().unwrap())
        })
        .collect();
    let mut populations = vec![Vec::with_capacity(settings.n_shots); points.len()];
    for ((p, _), r) in jobs.iter().zip(results) {
        populations[*p].push(r?);
    }
    if quiet {
        for row in populations.iter_mut() {
            let first = row[0];
            row.resize(settings.n_shots, first);
        }
    }
    let shots = sample_all(&populations, settings)?;
    Ok(InterferometerResult { scan_name: name.into(), scan: points.to_vec(), populations, shots, phases: vec![], mean_detuning: vec![] })
}

fn sample_all(populations: &[Vec<[f64; DIM]>], settings: &RunSettings) -> Result<Vec<Vec<ShotRecord>>> {
    let Some(n) = settings.n_atoms else {
        return Ok(vec![]);
    };
    populations
        .par_iter()
        .enumerate()
        .map(|(p, row)| {
            row.iter()
                .enumerate()
                .map(|(s, pops)| {
                    let total: f64 = pops.iter().sum();
                    let norm: Vec<f64> = pops.iter().map(|v| v.max(0.0) / total).collect();
                    sample_shot(&norm, n, &settings.detection, s as u64, &mut rng_for(settings.seed, SAMPLING_STREAM, p, s))
                })
                .collect()
        })
        .collect()
}

fn ladder(reference: Option<Pair>) -> Coupling {
    Coupling { reference, ..Coupling::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RabiConfig {
    pub pair: Pair,
    /// Peak Rabi frequency (Hz) on the reference pair.
    pub omega: f64,
    pub durations: Vec<f64>,
    /// Initial level.
    pub initial: f64,
    #[serde(default)]
    pub coupling: Coupling,
}

/// Populations of all levels after a resonant pulse of each duration.
pub fn rabi_scan(cfg: &RabiConfig, model: &Model, noise: &NoiseSpec, settings: &RunSettings, tol: &Tolerances) -> Result<InterferometerResult> {
    if cfg.durations.is_empty() {
        return Err(Error::InvalidArgument("empty scan".into()));
    }
    if cfg.durations.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
        return Err(Error::InvalidArgument("durations must be finite and >= 0".into()));
    }
    let initial = SpinState::basis(cfg.initial)?;
    let tone = |fields: &FieldParams, omega: f64| -> Result<PulseSegment> {
        let mut seg = rotation_pulse_with(cfg.pair, cfg.omega.max(1e-300), PI, 0.0, cfg.coupling, fields)?;
        seg.tones[0].omega = omega;
        Ok(seg)
    };
    if noise.is_quiet() {
        noise.validate()?;
        let lindblad = model.dissipation.build()?;
        let t_max = cfg.durations.iter().cloned().fold(0.0, f64::max);
        let mut seq = PulseSequence::new(model.fields.clone());
        let mut seg = tone(&model.fields, cfg.omega)?;
        seg.duration = t_max.max(1e-9);
        seg.label = "rabi".into();
        seq.push(seg);
        let mut order: Vec<usize> = (0..cfg.durations.len()).collect();
        order.sort_by(|&a, &b| cfg.durations[a].total_cmp(&cfg.durations[b]));
        let sorted: Vec<f64> = order.iter().map(|&k| cfg.durations[k]).collect();
        let rows = simulate(&seq, &initial, model, &lindblad, tol, &sorted)?;
        let mut populations = vec![vec![]; cfg.durations.len()];
        for (i, &k) in order.iter().enumerate() {
            populations[k] = vec![rows[i]; settings.n_shots.max(1)];
        }
        let shots = sample_all(&populations, settings)?;
        return Ok(InterferometerResult { scan_name: "duration_s".into(), scan: cfg.durations.clone(), populations, shots, phases: vec![], mean_detuning: vec![] });
    }
    scan("duration_s", &cfg.durations, model, noise, settings, tol, |p, fields, draw| {
        let d = cfg.durations[p];
        let mut seq = PulseSequence::new(fields.clone());
        if d > 0.0 {
            let theta = 2.0 * PI * cfg.omega * d;
            let mut seg = tone(fields, cfg.omega * noise.area_factor(draw, 0, theta))?;
            seg.duration = d;
            seq.push(seg);
        } else {
            seq.push(PulseSegment::dark(1e-9));
        }
        Ok((seq, initial.clone()))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum TlsMode {
    OnThroughout,
    AdiabaticOff {
        #[serde(default = "default_ramp")]
        ramp: f64,
    },
}

fn default_ramp() -> f64 {
    TLS_RAMP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RamseyConfig {
    pub pair: Pair,
    pub omega: f64,
    /// Time between the end of the first and the start of the second pulse (s).
    pub t_values: Vec<f64>,
    pub tls_mode: TlsMode,
    pub initial: f64,
    /// Oscillator offset from the pair resonance during the dark time (Hz).
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub closing_phase: f64,
    #[serde(default)]
    pub coupling: Coupling,
}

/// The two-pulse sequence for one dark time.
pub fn ramsey_sequence(cfg: &RamseyConfig, fields: &FieldParams, t: f64, noise: &NoiseSpec, draw: &ShotDraw, closing_phase: f64) -> Result<PulseSequence> {
    let nominal = fields.shifts(1.0).resonance(cfg.pair);
    let lo = Detuning::Fixed(nominal + cfg.offset);
    let mut open = rotation_pulse_with(cfg.pair, cfg.omega, PI / 2.0, 0.0, cfg.coupling, fields)?;
    open.tones[0].omega *= noise.area_factor(draw, 0, PI / 2.0);
    let mut close = rotation_pulse_with(cfg.pair, cfg.omega, PI / 2.0, closing_phase, cfg.coupling, fields)?;
    close.tones[0].omega *= noise.area_factor(draw, 1, PI / 2.0);
    let mut seq = PulseSequence::new(fields.clone());
    seq.push(open.labelled("open"));
    let tls_on = matches!(cfg.tls_mode, TlsMode::OnThroughout);
    match cfg.tls_mode {
        TlsMode::OnThroughout => {
            if t > 0.0 {
                seq.push(PulseSegment::dark(t).with_lo(lo));
            }
        }
        TlsMode::AdiabaticOff { ramp } => {
            if t < 2.0 * ramp {
                return Err(Error::InvalidArgument(format!("dark time {t} shorter than the two ramps")));
            }
            seq.push(PulseSegment::dark(ramp).with_lo(lo).with_tls(1.0, 0.0).labelled("ramp down"));
            if t > 2.0 * ramp {
                seq.push(PulseSegment::dark(t - 2.0 * ramp).with_lo(lo).with_tls(0.0, 0.0));
            }
            seq.push(PulseSegment::dark(ramp).with_lo(lo).with_tls(0.0, 1.0).labelled("ramp up"));
        }
    }
    let kick = noise.phase_kick(draw, 0, t, tls_on);
    if kick != 0.0 {
        seq.push_z(cfg.pair, kick);
    }
    seq.push(close.labelled("close"));
    Ok(seq)
}

pub fn ramsey(cfg: &RamseyConfig, model: &Model, noise: &NoiseSpec, settings: &RunSettings, tol: &Tolerances) -> Result<InterferometerResult> {
    let initial = SpinState::basis(cfg.initial)?;
    let mut r = scan("dark_time_s", &cfg.t_values, model, noise, settings, tol, |p, fields, draw| Ok((ramsey_sequence(cfg, fields, cfg.t_values[p], noise, draw, cfg.closing_phase)?, initial.clone())))?;
    let d = model.fields.shifts(1.0).resonance(cfg.pair) + cfg.offset;
    r.mean_detuning = vec![[d, f64::NAN]; cfg.t_values.len()];
    Ok(r)
}

/// Peak-to-peak fringe amplitude at dark time `t`, from four closing phases.
pub fn ramsey_contrast(cfg: &RamseyConfig, model: &Model, t: f64, tol: &Tolerances) -> Result<f64> {
    let lindblad = model.dissipation.build()?;
    let initial = SpinState::basis(cfg.initial)?;
    let (_, h) = cfg.pair.indices();
    let mut z = C64::new(0.0, 0.0);
    for k in 0..4 {
        let ph = cfg.closing_phase + k as f64 * PI / 2.0;
        let seq = ramsey_sequence(cfg, &model.fields, t, &NoiseSpec::none(), &ShotDraw::quiet(), ph)?;
        let p = simulate(&seq, &initial, model, &lindblad, tol, &[])?;
        z += C64::from_polar(p[0][h], ph);
    }
    Ok(z.norm())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualConfig {
    /// Rabi frequency quoted on the `(-7/2, -5/2)` line (Hz).
    pub omega: f64,
    /// Open time of each interferometer, pulse centre to pulse centre (s).
    pub t_values: Vec<f64>,
    #[serde(default = "default_gap")]
    pub gap: f64,
    /// Oscillator rate while both interferometers are open (Hz).
    #[serde(default = "default_window_detuning")]
    pub window_detuning: f64,
    #[serde(default)]
    pub closing_phases: [f64; 2],
}

fn default_gap() -> f64 {
    DUAL_GAP
}

fn default_window_detuning() -> f64 {
    DUAL_WINDOW_DETUNING
}

pub fn split_pair() -> Pair {
    Pair { low: -3.5, high: -2.5 }
}

pub fn dual_pairs() -> [Pair; 2] {
    [Pair { low: -2.5, high: -1.5 }, Pair { low: -4.5, high: -3.5 }]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualTiming {
    /// Centres of the opening pulses (s).
    pub open_centres: [f64; 2],
    /// Dark window while both are open (s).
    pub window: f64,
    /// Mean oscillator rate over each open interval (Hz).
    pub mean_detuning: [f64; 2],
    /// Nominal phases `2 pi T (E_l - E_h - <d>)`.
    pub phases: [f64; 2],
}

/// Split pulse, two interleaved interferometers, both closed after `t`.
pub fn dual_sequence(cfg: &DualConfig, fields: &FieldParams, t: f64, noise: &NoiseSpec, draw: &ShotDraw, closing: [f64; 2]) -> Result<(PulseSequence, DualTiming)> {
    let reference = Some(split_pair());
    let [p1, p2] = dual_pairs();
    let pulse = |pair: Pair, phase: f64, k: usize| -> Result<PulseSegment> {
        let mut s = rotation_pulse_with(pair, cfg.omega, PI / 2.0, phase, ladder(reference), fields)?;
        s.tones[0].omega *= noise.area_factor(draw, k, PI / 2.0);
        Ok(s)
    };
    let split = pulse(split_pair(), 0.0, 0)?;
    let o1 = pulse(p1, 0.0, 1)?;
    let o2 = pulse(p2, 0.0, 2)?;
    let c1 = pulse(p1, closing[0], 3)?;
    let c2 = pulse(p2, closing[1], 4)?;
    // durations from the nominal area, independent of jitter
    let (d0, d1, d2) = (split.duration, o1.duration, o2.duration);
    let g = cfg.gap;
    let start1 = d0 + g;
    let c1o = start1 + d1 / 2.0;
    let end2 = start1 + d1 + g + d2;
    let c2o = end2 - d2 / 2.0;
    let close1_start = c1o + t - d1 / 2.0;
    let window = close1_start - end2;
    if !(window >= 0.0) {
        return Err(Error::InvalidArgument(format!("open time {t} shorter than the interleaved pulse span")));
    }
    let mut seq = PulseSequence::new(fields.clone());
    seq.push(split.labelled("split"));
    seq.push(PulseSegment::dark(g));
    seq.push(o1.labelled("open 1"));
    seq.push(PulseSegment::dark(g));
    seq.push(o2.labelled("open 2"));
    if window > 0.0 {
        seq.push(PulseSegment::dark(window).with_lo(Detuning::Fixed(cfg.window_detuning)).labelled("shared window"));
    }
    let kick1 = noise.phase_kick(draw, 0, t, true);
    let kick2 = noise.phase_kick(draw, 1, t, true);
    if kick1 != 0.0 {
        seq.push_z(p1, kick1);
    }
    if kick2 != 0.0 {
        seq.push_z(p2, kick2);
    }
    seq.push(c1.labelled("close 1"));
    seq.push(PulseSegment::dark(g));
    seq.push(c2.labelled("close 2"));
    // oscillator schedule: segments with tones follow their pair, gaps inherit
    let s = fields.shifts(1.0);
    let r0 = s.resonance(split_pair());
    let r1 = s.resonance(p1);
    let r2 = s.resonance(p2);
    let schedule = [
        (0.0, d0, r0),
        (d0, start1, r0),
        (start1, start1 + d1, r1),
        (start1 + d1, start1 + d1 + g, r1),
        (start1 + d1 + g, end2, r2),
        (end2, close1_start, cfg.window_detuning),
        (close1_start, close1_start + d1, r1),
        (close1_start + d1, close1_start + d1 + g, r1),
        (close1_start + d1 + g, close1_start + d1 + g + d2, r2),
    ];
    let mean = |a: f64, b: f64| {
        schedule.iter().map(|&(s0, s1, r)| ((s1.min(b) - s0.max(a)).max(0.0)) * r).sum::<f64>() / (b - a)
    };
    let md = [mean(c1o, c1o + t), mean(c2o, c2o + t)];
    let e = |pair: Pair| s.energy(pair.low) - s.energy(pair.high);
    let phases = [2.0 * PI * t * (e(p1) - md[0]), 2.0 * PI * t * (e(p2) - md[1])];
    Ok((seq, DualTiming { open_centres: [c1o, c2o], window, mean_detuning: md, phases }))
}

/// Smallest open time the interleaved schedule allows.
pub fn dual_min_time(cfg: &DualConfig, fields: &FieldParams) -> Result<f64> {
    let reference = Some(split_pair());
    let [p1, p2] = dual_pairs();
    let d1 = rotation_pulse_with(p1, cfg.omega, PI / 2.0, 0.0, ladder(reference), fields)?.duration;
    let d2 = rotation_pulse_with(p2, cfg.omega, PI / 2.0, 0.0, ladder(reference), fields)?.duration;
    Ok(d1 / 2.0 + cfg.gap + d2 + d1 / 2.0)
}

/// Readout levels of the two interferometers.
pub const DUAL_SIGNALS: [f64; 2] = [-1.5, -3.5];

pub fn parallel_ramsey(cfg: &DualConfig, model: &Model, noise: &NoiseSpec, settings: &RunSettings, tol: &Tolerances) -> Result<InterferometerResult> {
    let initial = SpinState::basis(split_pair().high)?;
    let mut r = scan("open_time_s", &cfg.t_values, model, noise, settings, tol, |p, fields, draw| {
        Ok((dual_sequence(cfg, fields, cfg.t_values[p], noise, draw, cfg.closing_phases)?.0, initial.clone()))
    })?;
    for &t in &cfg.t_values {
        let (_, timing) = dual_sequence(cfg, &model.fields, t, &NoiseSpec::none(), &ShotDraw::quiet(), cfg.closing_phases)?;
        r.phases.push(timing.phases);
        r.mean_detuning.push(timing.mean_detuning);
    }
    Ok(r)
}

/// Ideal closing-phase fringe of one interferometer: population of `signal`
/// when the pair starts in `start` with free phase `phi`.
fn ideal_fringe_vector(pair: Pair, start: f64, signal: f64, phi: f64, phases: &[f64]) -> Result<C64> {
    let mut z = C64::new(0.0, 0.0);
    let psi = SpinState::basis(start)?;
    for &ph in phases {
        let u = tone_rotation(pair, PI / 2.0, ph)? * crate::spin_core::pair_rotation(pair, Axis::Z, phi) * tone_rotation(pair, PI / 2.0, 0.0)?;
        let p = psi.apply(&u).populations()[index_of(signal)?];
        z += C64::from_polar(p, ph);
    }
    Ok(z)
}

/// `exp(-i theta (cos(ph) sigma^x - sin(ph) sigma^y) / 2)`, the action of a
/// resonant tone with phase `ph`.
pub fn tone_rotation(pair: Pair, theta: f64, ph: f64) -> Result<crate::spin_core::CMat> {
    let x = pair_generator(pair.low, pair.high, Axis::X)?.matrix;
    let y = pair_generator(pair.low, pair.high, Axis::Y)?.matrix;
    let g = (x * C64::from(ph.cos()) - y * C64::from(ph.sin())) * C64::from(0.5);
    Ok(expm_hermitian(&g, theta))
}

/// Simulated phases of both interferometers at open time `t` from a four-point
/// scan of the closing phases, unwrapped next to the nominal phases.
pub fn dual_phases(cfg: &DualConfig, model: &Model, t: f64, tol: &Tolerances) -> Result<([f64; 2], DualTiming)> {
    let lindblad = model.dissipation.build()?;
    let initial = SpinState::basis(split_pair().high)?;
    let phases: Vec<f64> = (0..4).map(|k| k as f64 * PI / 2.0).collect();
    let mut z = [C64::new(0.0, 0.0); 2];
    let mut timing = None;
    for &ph in &phases {
        let (seq, tm) = dual_sequence(cfg, &model.fields, t, &NoiseSpec::none(), &ShotDraw::quiet(), [ph, ph])?;
        timing = Some(tm);
        let p = simulate(&seq, &initial, model, &lindblad, tol, &[])?;
        for k in 0..2 {
            z[k] += C64::from_polar(p[0][index_of(DUAL_SIGNALS[k])?], ph);
        }
    }
    let timing = timing.unwrap();
    let [p1, p2] = dual_pairs();
    let starts = [p1.low, p2.high];
    let mut out = [0.0; 2];
    for k in 0..2 {
        let pair = [p1, p2][k];
        let z0 = ideal_fringe_vector(pair, starts[k], DUAL_SIGNALS[k], 0.0, &phases)?;
        let z1 = ideal_fringe_vector(pair, starts[k], DUAL_SIGNALS[k], 0.1, &phases)?;
        let sign = (z1 / z0).arg().signum();
        let raw = sign * (z[k] / z0).arg();
        let nominal = timing.phases[k];
        out[k] = nominal + crate::analysis::wrap_phase(raw - nominal);
    }
    Ok((out, timing))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FringeInversion {
    /// Fringe frequencies versus open time (Hz).
    pub f1: f64,
    pub f1_error: f64,
    pub f2: f64,
    pub f2_error: f64,
    pub q: f64,
    pub q_error: f64,
    pub b: f64,
    pub b_error: f64,
}

/// Turns the fringe frequencies `|4q - b - d_w|` and `|8q - b - d_w|` into
/// `(q, b)`, taking each sign closest to a prior estimate.
pub fn invert_fringe_frequencies(f: [(f64, f64); 2], window_detuning: f64, prior_q: f64, prior_b: f64) -> FringeInversion {
    let pick = |fk: f64, prior: f64| {
        let a = window_detuning + fk;
        let b = window_detuning - fk;
        if (a - prior).abs() <= (b - prior).abs() {
            a
        } else {
            b
        }
    };
    let x1 = pick(f[0].0, 4.0 * prior_q - prior_b);
    let x2 = pick(f[1].0, 8.0 * prior_q - prior_b);
    let (e1, e2) = (f[0].1, f[1].1);
    FringeInversion {
        f1: f[0].0,
        f1_error: e1,
        f2: f[1].0,
        f2_error: e2,
        q: (x2 - x1) / 4.0,
        q_error: (e1 * e1 + e2 * e2).sqrt() / 4.0,
        b: x2 - 2.0 * x1,
        b_error: (e2 * e2 + 4.0 * e1 * e1).sqrt(),
    }
}

/// Sine fits of both readout populations against open time, then inversion.
pub fn fit_dual_fringes(result: &InterferometerResult, window_detuning: f64, prior_q: f64, prior_b: f64) -> Result<FringeInversion> {
    let mut f = [(0.0, 0.0); 2];
    for k in 0..2 {
        let y = result.level(DUAL_SIGNALS[k])?;
        let fit = crate::analysis::fit_sine(&result.scan, &y, None)?;
        f[k] = (fit.get("frequency").unwrap().abs(), fit.error("frequency").unwrap_or(0.0));
    }
    Ok(invert_fringe_frequencies(f, window_detuning, prior_q, prior_b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseControl {
    /// Oscillator detuned during a fixed dark span before the last pulse.
    Window,
    /// Ideal z rotation on the qubit.
    Virtual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AncillaConfig {
    /// Rabi frequency on the `(down, up)` line (Hz).
    pub omega: f64,
    pub phis: Vec<f64>,
    #[serde(default = "default_window")]
    pub window: f64,
    /// Prepare the input with a pi/2 pulse from `up`; otherwise start from the ideal state.
    #[serde(default = "yes")]
    pub prepare: bool,
    /// Additive correction to the linear splitting (Hz).
    #[serde(default)]
    pub b_correction: f64,
    #[serde(default = "default_control")]
    pub control: PhaseControl,
}

fn default_window() -> f64 {
    ANCILLA_WINDOW
}

fn yes() -> bool {
    true
}

fn default_control() -> PhaseControl {
    PhaseControl::Window
}

pub fn qubit_pair() -> Pair {
    Pair { low: DOWN, high: UP }
}

/// `(|up> - i|down>)/sqrt 2`.
pub fn coherent_input() -> SpinState {
    let mut a = vec![C64::new(0.0, 0.0); DIM];
    a[index_of(UP).unwrap()] = C64::new(1.0, 0.0);
    a[index_of(DOWN).unwrap()] = -I;
    SpinState::from_amplitudes(&a).unwrap()
}

pub fn ancilla_sequence(cfg: &AncillaConfig, fields: &FieldParams, phi: f64, noise: &NoiseSpec, draw: &ShotDraw) -> Result<(PulseSequence, SpinState)> {
    let mut f = fields.clone();
    f.b += cfg.b_correction;
    let reference = Some(qubit_pair());
    let pulse = |pair: Pair, k: usize| -> Result<PulseSegment> {
        let mut s = rotation_pulse_with(pair, cfg.omega, PI / 2.0, 0.0, ladder(reference), &f)?;
        s.tones[0].omega *= noise.area_factor(draw, k, PI / 2.0);
        Ok(s)
    };
    let mut seq = PulseSequence::new(f.clone());
    let initial = if cfg.prepare {
        seq.push(pulse(qubit_pair(), 0)?.labelled("prepare"));
        SpinState::basis(UP)?
    } else {
        coherent_input()
    };
    seq.push(pulse(Pair { low: UP, high: ANCILLA_A }, 1)?.labelled("map up"));
    seq.push(pulse(Pair { low: ANCILLA_B, high: DOWN }, 2)?.labelled("map down"));
    match cfg.control {
        PhaseControl::Window => {
            // phi = 2 pi delta T for a detuning delta above the qubit resonance
            let res = f.shifts(1.0).resonance(qubit_pair());
            let delta = phi / (2.0 * PI * cfg.window);
            seq.push(PulseSegment::dark(cfg.window).with_lo(Detuning::Fixed(res + delta)).labelled("phase window"));
        }
        PhaseControl::Virtual => {
            // exp(-i phi s^z) on (up, down) is exp(+i phi sigma^z_pair / 2) with down low
            seq.push_z(qubit_pair(), -phi);
        }
    }
    let kick = noise.phase_kick(draw, 0, cfg.window, true);
    if kick != 0.0 {
        seq.push_z(qubit_pair(), kick);
    }
    seq.push(pulse(qubit_pair(), 3)?.labelled("readout"));
    Ok((seq, initial))
}

pub fn ancilla_measurement(cfg: &AncillaConfig, model: &Model, noise: &NoiseSpec, settings: &RunSettings, tol: &Tolerances) -> Result<InterferometerResult> {
    scan("phi_rad", &cfg.phis, model, noise, settings, tol, |p, fields, draw| ancilla_sequence(cfg, fields, cfg.phis[p], noise, draw))
}

/// Ideal single-particle propagator of the mapped measurement at `phi = 0`.
pub fn ideal_measurement_unitary() -> crate::spin_core::CMat {
    use crate::spin_core::pair_rotation;
    pair_rotation(qubit_pair(), Axis::X, PI / 2.0) * pair_rotation(Pair { low: ANCILLA_B, high: DOWN }, Axis::X, PI / 2.0) * pair_rotation(Pair { low: UP, high: ANCILLA_A }, Axis::X, PI / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakageConfig {
    /// Quadratic shift (Hz), held fixed while the Rabi frequency varies.
    pub q: f64,
    pub ratios: Vec<f64>,
    #[serde(default = "default_phi_points")]
    pub phi_points: usize,
    /// Spontaneous emission of a monochromatic laser.
    #[serde(default)]
    pub include_scattering: bool,
    #[serde(default = "default_b")]
    pub b: f64,
}

fn default_phi_points() -> usize {
    24
}

fn default_b() -> f64 {
    1000.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub ratio: f64,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
}

/// `<O^z>/N_at = p_a - p_b` over a full turn of the control phase for each
/// separation `2|q|/Omega`.
pub fn leakage_scan(cfg: &LeakageConfig, tol: &Tolerances) -> Result<Vec<LeakageRow>> {
    if cfg.ratios.is_empty() || cfg.phi_points < 2 {
        return Err(Error::InvalidArgument("need ratios and at least two phases".into()));
    }
    if cfg.ratios.iter().any(|&r| !(r > 0.0)) || cfg.q == 0.0 {
        return Err(Error::InvalidArgument("ratios must be positive and q nonzero".into()));
    }
    let fields = FieldParams::new(cfg.b, cfg.q);
    let mut model = Model::coherent(fields.clone());
    if cfg.include_scattering {
        model.dissipation = Dissipation::monochromatic_scattering();
    }
    let lindblad = model.dissipation.build()?;
    let phis: Vec<f64> = (0..cfg.phi_points).map(|k| 2.0 * PI * k as f64 / cfg.phi_points as f64).collect();
    let (ia, ib) = (index_of(ANCILLA_A)?, index_of(ANCILLA_B)?);
    let jobs: Vec<(usize, usize)> = (0..cfg.ratios.len()).flat_map(|r| (0..phis.len()).map(move |p| (r, p))).collect();
    let vals: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(r, p)| {
            let omega = 2.0 * cfg.q.abs() / cfg.ratios[r];
            let acfg = AncillaConfig { omega, phis: vec![], window: 0.0, prepare: false, b_correction: 0.0, control: PhaseControl::Virtual };
            let (seq, init) = ancilla_sequence(&acfg, &fields, phis[p], &NoiseSpec::none(), &ShotDraw::quiet())?;
            let pops = simulate(&seq, &init, &model, &lindblad, tol, &[])?;
            Ok(pops[0][ia] - pops[0][ib])
        })
        .collect();
    let mut rows = Vec::new();
    for (r, &ratio) in cfg.ratios.iter().enumerate() {
        let v: Vec<f64> = jobs.iter().zip(&vals).filter(|((rr, _), _)| *rr == r).map(|(_, v)| v.as_ref().map(|x| *x).map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>().map_err(Error::InvalidArgument)?;
        rows.push(LeakageRow {
            ratio,
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionNoiseReport {
    pub n_atoms: u64,
    pub n_shots: usize,
    /// Phase standard deviation with all atoms in one interferometer, both ports read.
    pub single: f64,
    /// Each of the two parallel interferometers, both ports read.
    pub dual_all_ports: [f64; 2],
    /// Each of the two parallel interferometers, one port read against `N_at/2`.
    pub dual_single_port: [f64; 2],
}

impl ProjectionNoiseReport {
    pub fn dual_ratio(&self) -> [f64; 2] {
        [self.dual_all_ports[0] / self.single, self.dual_all_ports[1] / self.single]
    }

    pub fn single_port_ratio(&self) -> [f64; 2] {
        [self.dual_single_port[0] / self.dual_all_ports[0], self.dual_single_port[1] / self.dual_all_ports[1]]
    }
}

fn sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Phase from the upper-port fraction `p = (1 - cos phi)/2` of an ideal fringe.
fn phase_from_fraction(p: f64) -> f64 {
    (1.0 - 2.0 * p.clamp(0.0, 1.0)).acos()
}

/// Monte-Carlo projection-noise comparison at mid-fringe with ideal pulses.
pub fn projection_noise_scaling(n_atoms: u64, n_shots: usize, seed: u64) -> Result<ProjectionNoiseReport> {
    use crate::spin_core::pair_rotation;
    if n_atoms < 2 || n_shots < 2 {
        return Err(Error::InvalidArgument("need at least two atoms and two shots".into()));
    }
    let det = DetectionModel::ideal();
    let [p1, p2] = dual_pairs();
    let mid = PI / 2.0;
    let ramsey_u = |pair: Pair| pair_rotation(pair, Axis::X, PI / 2.0) * pair_rotation(pair, Axis::Z, mid) * pair_rotation(pair, Axis::X, PI / 2.0);
    let single_state = SpinState::basis(p1.low)?.apply(&ramsey_u(p1));
    let dual_state = SpinState::basis(split_pair().high)?.apply(&pair_rotation(split_pair(), Axis::X, PI / 2.0)).apply(&ramsey_u(p1)).apply(&ramsey_u(p2));
    let (l1, h1) = p1.indices();
    let (l2, h2) = p2.indices();
    let ps = single_state.populations();
    let pd = dual_state.populations();
    let per_shot: Vec<Result<(f64, [f64; 2], [f64; 2])>> = (0..n_shots)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_for(seed, SAMPLING_STREAM, 0, s);
            let a = sample_shot(&ps, n_atoms, &det, s as u64, &mut rng)?;
            let single = phase_from_fraction(a.detected[h1] as f64 / (a.detected[l1] + a.detected[h1]) as f64);
            let b = sample_shot(&pd, n_atoms, &det, s as u64, &mut rng)?;
            let half = n_atoms as f64 / 2.0;
            let all = [
                phase_from_fraction(b.detected[h1] as f64 / (b.detected[l1] + b.detected[h1]) as f64),
                phase_from_fraction(b.detected[l2] as f64 / (b.detected[l2] + b.detected[h2]) as f64),
            ];
            let one = [phase_from_fraction(b.detected[h1] as f64 / half), phase_from_fraction(b.detected[l2] as f64 / half)];
            Ok((single, all, one))
        })
        .collect();
    let mut single = Vec::with_capacity(n_shots);
    let mut all = [Vec::with_capacity(n_shots), Vec::with_capacity(n_shots)];
    let mut one = [Vec::with_capacity(n_shots), Vec::with_capacity(n_shots)];
    for r in per_shot {
        let (s, a, o) = r?;
        single.push(s);
        for k in 0..2 {
            all[k].push(a[k]);
            one[k].push(o[k]);
        }
    }
    Ok(ProjectionNoiseReport {
        n_atoms,
        n_shots,
        single: sd(&single),
        dual_all_ports: [sd(&all[0]), sd(&all[1])],
        dual_single_port: [sd(&one[0]), sd(&one[1])],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_moments() {
        let q = gauss_hermite(9);
        let m0: f64 = q.iter().map(|p| p.1).sum();
        let m2: f64 = q.iter().map(|p| p.1 * p.0 * p.0).sum();
        let m4: f64 = q.iter().map(|p| p.1 * p.0.powi(4)).sum();
        assert!((m0 - 1.0).abs() < 1e-12 && (m2 - 1.0).abs() < 1e-12 && (m4 - 3.0).abs() < 1e-10);
    }

    #[test]
    fn zero_rabi_keeps_populations() {
        let cfg = RabiConfig { pair: Pair::new(-2.5, -1.5).unwrap(), omega: 0.0, durations: vec![0.0, 0.01, 0.05], initial: -2.5, coupling: Coupling::default() };
        let r = rabi_scan(&cfg, &Model::coherent(FieldParams::new(960.0, -320.0)), &NoiseSpec::none(), &RunSettings::default(), &Tolerances::default()).unwrap();
        for p in r.level(-2.5).unwrap() {
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_scan_rejected() {
        let cfg = RamseyConfig {
            pair: Pair::new(-3.5, -2.5).unwrap(),
            omega: 93.0,
            t_values: vec![],
            tls_mode: TlsMode::OnThroughout,
            initial: -2.5,
            offset: 0.0,
            closing_phase: 0.0,
            coupling: Coupling::default(),
        };
        assert!(ramsey(&cfg, &Model::coherent(FieldParams::new(960.0, 190.0)), &NoiseSpec::none(), &RunSettings::default(), &Tolerances::default()).is_err());
    }

    #[test]
    fn resonant_ramsey_is_flat() {
        let cfg = RamseyConfig {
            pair: Pair::new(-3.5, -2.5).unwrap(),
            omega: 93.0,
            t_values: vec![0.001, 0.0037, 0.011, 0.02],
            tls_mode: TlsMode::OnThroughout,
            initial: -2.5,
            offset: 0.0,
            closing_phase: 0.0,
            coupling: Coupling::target_only(),
        };
        let r = ramsey(&cfg, &Model::coherent(FieldParams::new(960.0, 190.0)), &NoiseSpec::none(), &RunSettings::default(), &Tolerances::default()).unwrap();
        let p = r.level(-3.5).unwrap();
        for v in &p {
            assert!((v - 1.0).abs() < 1e-8, "{p:?}");
        }
    }

    #[test]
    fn noise_draws_are_reproducible() {
        let n = NoiseSpec { b_sigma: 3.0, ..NoiseSpec::default() };
        let a = n.draw(&mut rng_for(9, NOISE_STREAM, 3, 4));
        let b = n.draw(&mut rng_for(9, NOISE_STREAM, 3, 4));
        let c = n.draw(&mut rng_for(9, NOISE_STREAM, 3, 5));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dual_rejects_short_times() {
        let cfg = DualConfig { omega: 77.0, t_values: vec![0.001], gap: DUAL_GAP, window_detuning: 1.0, closing_phases: [0.0; 2] };
        let f = FieldParams::new(1000.0, -303.0);
        let tmin = dual_min_time(&cfg, &f).unwrap();
        assert!(dual_sequence(&cfg, &f, tmin * 0.99, &NoiseSpec::none(), &ShotDraw::quiet(), [0.0; 2]).is_err());
        let (seq, tm) = dual_sequence(&cfg, &f, tmin * 1.5, &NoiseSpec::none(), &ShotDraw::quiet(), [0.0; 2]).unwrap();
        assert!(tm.window > 0.0);
        assert!(seq.duration() > tmin);
    }
}
