//! Level shifts, Raman couplings and dissipation channels.
//!
//! Hamiltonians are expressed in Hz and evolved with `i dpsi/dt = 2 pi H psi`.
//! In the rotating frame the local oscillator is described by a rate `delta`
//! (Hz per unit of `m`); the frame adds `delta * m` to every level, so a pair
//! `(l, h)` is resonant when `delta = (E_l - E_h) / (h - l)`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq;
use crate::spin_core::{clebsch_gordan, index_of, projection, spin_operators, CMat, Pair, C64, DIM, SPIN};

/// Piecewise-linear multiplier in `[0, 1]` versus time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    /// `(time s, value)` knots, strictly increasing in time.
    pub knots: Vec<(f64, f64)>,
}

impl Profile {
    pub fn value(&self, t: f64) -> f64 {
        let k = &self.knots;
        if k.is_empty() {
            return 1.0;
        }
        if t <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((ta, va), (tb, vb)) = (w[0], w[1]);
            if t <= tb {
                return va + (vb - va) * (t - ta) / (tb - ta);
            }
        }
        k[k.len() - 1].1
    }

    pub fn validate(&self) -> Result<()> {
        for &(t, v) in &self.knots {
            if !t.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("profile knot ({t}, {v}) outside [0, 1]")));
            }
        }
        if self.knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidArgument("profile times must increase".into()));
        }
        Ok(())
    }
}

/// Level-shift parameters in Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldParams {
    /// Magnetic linear splitting per unit `m`.
    pub b: f64,
    /// Quadratic shift at full light-shift intensity.
    pub q: f64,
    /// Vector light shift per unit `m` at full intensity.
    #[serde(default)]
    pub b_vector: f64,
    /// Light-shift intensity multiplier versus time; constant 1 when absent.
    #[serde(default)]
    pub tls_profile: Option<Profile>,
}

impl FieldParams {
    pub fn new(b: f64, q: f64) -> Self {
        Self { b, q, b_vector: 0.0, tls_profile: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.b.is_finite() || !self.q.is_finite() || !self.b_vector.is_finite() {
            return Err(Error::InvalidArgument("field parameters must be finite".into()));
        }
        if let Some(p) = &self.tls_profile {
            p.validate()?;
        }
        Ok(())
    }

    /// Effective shifts when the light-shift beam is at `tls` of full power.
    pub fn shifts(&self, tls: f64) -> LevelShifts {
        LevelShifts { b: self.b + self.b_vector * tls, q: self.q * tls }
    }
}

/// Instantaneous `(b, q)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelShifts {
    pub b: f64,
    pub q: f64,
}

impl LevelShifts {
    pub fn energy(&self, m: f64) -> f64 {
        self.b * m + self.q * m * m
    }

    pub fn energies(&self) -> [f64; DIM] {
        std::array::from_fn(|i| self.energy(projection(i)))
    }

    /// Oscillator rate per unit `m` resonant with `pair`.
    pub fn resonance(&self, pair: Pair) -> f64 {
        (self.energy(pair.low) - self.energy(pair.high)) / (pair.high - pair.low)
    }
}

/// `diag(b(t) m + q(t) m^2)` in Hz.
pub fn diagonal_hamiltonian(fields: &FieldParams, t: f64) -> DMatrix<f64> {
    let tls = fields.tls_profile.as_ref().map_or(1.0, |p| p.value(t));
    let e = fields.shifts(tls).energies();
    DMatrix::from_diagonal(&DVector::from_column_slice(&e))
}

/// Temporal shape of a tone within its segment.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape", deny_unknown_fields)]
pub enum Envelope {
    #[default]
    Square,
    /// Trapezoid with linear edges of length `rise` (s).
    LinearRamp { rise: f64 },
    /// Cosine-tapered edges of length `rise` (s); `rise = duration / 2` is a Hann window.
    RaisedCosine { rise: f64 },
}

impl Envelope {
    pub fn value(&self, tau: f64, duration: f64) -> f64 {
        if tau < 0.0 || tau > duration {
            return 0.0;
        }
        let edge = tau.min(duration - tau);
        match *self {
            Envelope::Square => 1.0,
            Envelope::LinearRamp { rise } => {
                if rise <= 0.0 {
                    1.0
                } else {
                    (edge / rise).min(1.0)
                }
            }
            Envelope::RaisedCosine { rise } => {
                if rise <= 0.0 || edge >= rise {
                    1.0
                } else {
                    0.5 * (1.0 - (PI * edge / rise).cos())
                }
            }
        }
    }

    /// `int_0^duration value / duration`.
    pub fn area_fraction(&self, duration: f64) -> f64 {
        match *self {
            Envelope::Square => 1.0,
            Envelope::LinearRamp { rise } | Envelope::RaisedCosine { rise } => {
                let r = rise.clamp(0.0, duration / 2.0);
                1.0 - r / duration
            }
        }
    }

    pub fn is_square(&self) -> bool {
        match *self {
            Envelope::Square => true,
            Envelope::LinearRamp { rise } | Envelope::RaisedCosine { rise } => rise <= 0.0,
        }
    }

    pub fn validate(&self, duration: f64) -> Result<()> {
        match *self {
            Envelope::Square => Ok(()),
            Envelope::LinearRamp { rise } | Envelope::RaisedCosine { rise } => {
                if !(rise >= 0.0 && 2.0 * rise <= duration * (1.0 + 1e-12)) {
                    Err(Error::InvalidArgument(format!("envelope rise {rise} does not fit in {duration} s")))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Which pairs a tone drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// Every pair with the tone's `|dm|`.
    #[default]
    Ladder,
    /// Only the addressed pair.
    TargetOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coupling {
    #[serde(default)]
    pub mode: CouplingMode,
    /// Scale `|dm| = 1` couplings by two-photon Clebsch-Gordan products.
    #[serde(default = "default_true")]
    pub cg_weighting: bool,
    /// Include the counter-polarized process that is far off resonance.
    #[serde(default)]
    pub sigma_plus: bool,
    /// Pair on which `omega` is quoted; the addressed pair when absent.
    #[serde(default)]
    pub reference: Option<Pair>,
}

fn default_true() -> bool {
    true
}

impl Default for Coupling {
    fn default() -> Self {
        Self { mode: CouplingMode::Ladder, cg_weighting: true, sigma_plus: false, reference: None }
    }
}

impl Coupling {
    pub fn target_only() -> Self {
        Self { mode: CouplingMode::TargetOnly, cg_weighting: false, sigma_plus: false, reference: None }
    }
}

/// Oscillator frequency of a tone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Detuning {
    /// Fixed rate per unit `m` (Hz).
    Fixed(f64),
    /// Resonant with the addressed pair, plus `offset` Hz.
    Resonant { offset: f64 },
    /// Resonant with another pair, plus `offset` Hz.
    Track { pair: Pair, offset: f64 },
}

impl Default for Detuning {
    fn default() -> Self {
        Detuning::Resonant { offset: 0.0 }
    }
}

impl Detuning {
    pub fn rate(&self, shifts: &LevelShifts, own: Pair) -> f64 {
        match *self {
            Detuning::Fixed(hz) => hz,
            Detuning::Resonant { offset } => shifts.resonance(own) + offset,
            Detuning::Track { pair, offset } => shifts.resonance(pair) + offset,
        }
    }
}

/// Raman drive addressing one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RamanTone {
    pub pair: Pair,
    /// Peak Rabi frequency on the reference pair (Hz).
    pub omega: f64,
    #[serde(default)]
    pub detuning: Detuning,
    /// Phase offset (rad).
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub coupling: Coupling,
    #[serde(default)]
    pub envelope: Envelope,
}

impl RamanTone {
    pub fn resonant(pair: Pair, omega: f64) -> Self {
        Self {
            pair,
            omega,
            detuning: Detuning::default(),
            phase: 0.0,
            coupling: Coupling::default(),
            envelope: Envelope::Square,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pair.validate()?;
        let dm = self.pair.dm();
        if !(1..=2).contains(&dm) {
            return Err(Error::InvalidPair(self.pair.low, self.pair.high));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) || !self.phase.is_finite() {
            return Err(Error::InvalidArgument(format!("tone omega {} / phase {}", self.omega, self.phase)));
        }
        if let Some(r) = self.coupling.reference {
            r.validate()?;
            if r.dm() != dm {
                return Err(Error::InvalidArgument("reference pair must share the tone's |dm|".into()));
            }
        }
        if let Detuning::Track { pair, .. } = self.detuning {
            pair.validate()?;
        }
        Ok(())
    }

    /// `(low index, high index, Rabi frequency)` for each driven pair, and the
    /// counter-polarized couplings when enabled.
    /// Rabi frequency on the addressed pair itself.
    pub fn target_omega(&self) -> f64 {
        let (tl, _) = self.pair.indices();
        self.driven_pairs().0.iter().find(|p| p.0 == tl).map_or(self.omega, |p| p.2)
    }

    pub fn driven_pairs(&self) -> (Vec<(usize, usize, f64)>, Vec<(usize, usize, f64)>) {
        let dm = self.pair.dm();
        let c = &self.coupling;
        let reference = c.reference.unwrap_or(self.pair);
        let weighted = c.cg_weighting && dm == 1;
        let (rl, _) = reference.indices();
        let norm = if weighted { two_photon_weight(projection(rl)) } else { 1.0 };
        let mut minus = Vec::new();
        let mut plus = Vec::new();
        let (tl, th) = self.pair.indices();
        let lows: Vec<usize> = match c.mode {
            CouplingMode::TargetOnly => vec![tl],
            CouplingMode::Ladder => (0..DIM - dm).collect(),
        };
        for l in lows {
            let h = l + dm;
            let w = if weighted { two_photon_weight(projection(l)) / norm } else { 1.0 };
            minus.push((l, h, self.omega * w));
            if c.sigma_plus {
                let wp = if weighted { two_photon_weight_plus(projection(l)) / norm } else { 1.0 };
                plus.push((l, h, self.omega * wp));
            }
        }
        debug_assert!(th == tl + dm);
        (minus, plus)
    }
}

/// `|<9/2 l; 1 0|9/2 l> <9/2 l+1; 1 -1|9/2 l>|` for the pair `(l, l+1)`.
pub fn two_photon_weight(low: f64) -> f64 {
    (clebsch_gordan(SPIN, low, 1.0, 0.0, SPIN, low) * clebsch_gordan(SPIN, low + 1.0, 1.0, -1.0, SPIN, low)).abs()
}

/// Counter-polarized leg product through the excited level `l + 1`.
pub fn two_photon_weight_plus(low: f64) -> f64 {
    (clebsch_gordan(SPIN, low + 1.0, 1.0, 0.0, SPIN, low + 1.0) * clebsch_gordan(SPIN, low, 1.0, 1.0, SPIN, low + 1.0)).abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Frame rotating with the oscillator, counter-rotating terms dropped.
    #[default]
    Rotating,
    /// No frame transformation; couplings oscillate at the beat frequency.
    LabBeat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    /// `H[i][j] += a e^{i theta}` plus the conjugate.
    Exponential,
    /// `H[i][j] = H[j][i] += a cos(theta)`.
    Cosine,
}

/// One off-diagonal drive term with phase `phase0 + 2 pi (nu0 tau + nu1 tau^2 / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingTerm {
    pub i: usize,
    pub j: usize,
    pub amp: f64,
    pub phase0: f64,
    pub nu0: f64,
    pub nu1: f64,
    pub kind: TermKind,
    pub envelope: Envelope,
}

/// Hamiltonian on `[t0, t1]` with linearly varying diagonal and the
/// light-shift multiplier used to scale dissipation.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianPiece {
    pub t0: f64,
    pub t1: f64,
    pub diag0: [f64; DIM],
    pub diag1: [f64; DIM],
    pub terms: Vec<CouplingTerm>,
    pub tls0: f64,
    pub tls1: f64,
}

impl HamiltonianPiece {
    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    fn frac(&self, t: f64) -> f64 {
        let d = self.duration();
        if d.is_finite() && d > 0.0 {
            ((t - self.t0) / d).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn tls(&self, t: f64) -> f64 {
        let s = self.frac(t);
        self.tls0 + (self.tls1 - self.tls0) * s
    }

    pub fn eval(&self, t: f64) -> CMat {
        let s = self.frac(t);
        let mut h = CMat::zeros(DIM, DIM);
        for k in 0..DIM {
            h[(k, k)] = C64::from(self.diag0[k] + (self.diag1[k] - self.diag0[k]) * s);
        }
        let tau = t - self.t0;
        let dur = self.duration();
        for term in &self.terms {
            let env = if dur.is_finite() { term.envelope.value(tau, dur) } else { 1.0 };
            if env == 0.0 {
                continue;
            }
            let theta = term.phase0 + 2.0 * PI * (term.nu0 * tau + 0.5 * term.nu1 * tau * tau);
            match term.kind {
                TermKind::Exponential => {
                    let z = C64::from_polar(term.amp * env, theta);
                    h[(term.i, term.j)] += z;
                    h[(term.j, term.i)] += z.conj();
                }
                TermKind::Cosine => {
                    let v = C64::from(term.amp * env * theta.cos());
                    h[(term.i, term.j)] += v;
                    h[(term.j, term.i)] += v;
                }
            }
        }
        h
    }

    /// True when `eval` does not depend on time inside the piece.
    pub fn is_static(&self) -> bool {
        self.diag0 == self.diag1
            && self.tls0 == self.tls1
            && self.terms.iter().all(|t| {
                t.kind == TermKind::Exponential && t.nu0 == 0.0 && t.nu1 == 0.0 && t.envelope.is_square()
            })
    }

    /// Largest frequency scale present (Hz).
    pub fn max_frequency(&self) -> f64 {
        let mut f: f64 = 1.0;
        for d in [&self.diag0, &self.diag1] {
            let hi = d.iter().cloned().fold(f64::MIN, f64::max);
            let lo = d.iter().cloned().fold(f64::MAX, f64::min);
            f = f.max(hi - lo);
        }
        for t in &self.terms {
            let dur = if self.duration().is_finite() { self.duration() } else { 0.0 };
            f = f.max(2.0 * t.amp).max((t.nu0 + t.nu1 * dur).abs()).max(t.nu0.abs());
        }
        f
    }
}

/// Frame bookkeeping for one stretch of constant-form drive.
#[derive(Clone, Copy, Debug)]
pub struct FrameState {
    pub frame: Frame,
    /// Oscillator rate per unit `m` at the start and end of the stretch.
    pub lo0: f64,
    pub lo1: f64,
    /// Oscillator phase accumulated before the stretch (cycles per unit `m`).
    pub lo_cycles: f64,
}

/// Builds the piece for `tones` over `[t0, t1]` with shifts varying linearly
/// between `s0` and `s1`.
#[allow(clippy::too_many_arguments)]
pub fn build_piece(
    tones: &[RamanTone],
    s0: &LevelShifts,
    s1: &LevelShifts,
    t0: f64,
    t1: f64,
    fs: FrameState,
    tls0: f64,
    tls1: f64,
) -> HamiltonianPiece {
    let dur = t1 - t0;
    let slope = |a: f64, b: f64| if dur.is_finite() && dur > 0.0 { (b - a) / dur } else { 0.0 };
    let e0 = s0.energies();
    let e1 = s1.energies();
    let (diag0, diag1) = match fs.frame {
        Frame::Rotating => (
            std::array::from_fn(|i| e0[i] + fs.lo0 * projection(i)),
            std::array::from_fn(|i| e1[i] + fs.lo1 * projection(i)),
        ),
        Frame::LabBeat => (e0, e1),
    };
    let frame_slope = slope(fs.lo0, fs.lo1);
    let mut terms = Vec::new();
    for tone in tones {
        let k0 = tone.detuning.rate(s0, tone.pair);
        let k1 = tone.detuning.rate(s1, tone.pair);
        let tone_slope = slope(k0, k1);
        let d = tone.pair.dm() as f64;
        let (minus, plus) = tone.driven_pairs();
        match fs.frame {
            Frame::Rotating => {
                for (i, j, om) in minus {
                    terms.push(CouplingTerm {
                        i,
                        j,
                        amp: om / 2.0,
                        phase0: tone.phase,
                        nu0: d * (fs.lo0 - k0),
                        nu1: d * (frame_slope - tone_slope),
                        kind: TermKind::Exponential,
                        envelope: tone.envelope,
                    });
                }
                for (i, j, om) in plus {
                    terms.push(CouplingTerm {
                        i,
                        j,
                        amp: om / 2.0,
                        phase0: tone.phase + 4.0 * PI * d * fs.lo_cycles,
                        nu0: d * (fs.lo0 + k0),
                        nu1: d * (frame_slope + tone_slope),
                        kind: TermKind::Exponential,
                        envelope: tone.envelope,
                    });
                }
            }
            Frame::LabBeat => {
                for (i, j, om) in minus.into_iter().chain(plus) {
                    terms.push(CouplingTerm {
                        i,
                        j,
                        amp: om,
                        phase0: 2.0 * PI * d * fs.lo_cycles - tone.phase,
                        nu0: d * k0,
                        nu1: d * tone_slope,
                        kind: TermKind::Cosine,
                        envelope: tone.envelope,
                    });
                }
            }
        }
    }
    HamiltonianPiece { t0, t1, diag0, diag1, terms, tls0, tls1 }
}

/// Time-independent drive Hamiltonian at full light-shift intensity, defined on
/// `[0, inf)`. The first tone fixes the oscillator of the frame.
pub fn raman_hamiltonian(tones: &[RamanTone], fields: &FieldParams, frame: Frame) -> Result<HamiltonianPiece> {
    for t in tones {
        t.validate()?;
    }
    fields.validate()?;
    let s = fields.shifts(1.0);
    let lo = tones.first().map_or(0.0, |t| t.detuning.rate(&s, t.pair));
    let fs = FrameState { frame, lo0: lo, lo1: lo, lo_cycles: 0.0 };
    Ok(build_piece(tones, &s, &s, 0.0, f64::INFINITY, fs, 1.0, 1.0))
}

/// A jump operator with its rate (s^-1).
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub label: String,
    pub op: CMat,
    pub rate: f64,
    /// Rate follows the light-shift intensity multiplier.
    pub tls_scaled: bool,
}

/// Dissipator `sum_k rate_k (L rho L^+ - {L^+ L, rho} / 2)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LindbladSpec {
    pub channels: Vec<Channel>,
}

impl LindbladSpec {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn merged(mut self, other: LindbladSpec) -> Self {
        self.channels.extend(other.channels);
        self
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for c in &mut self.channels {
            c.rate *= factor;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.channels {
            if !(c.rate >= 0.0) || !c.rate.is_finite() {
                return Err(Error::NegativeRate(c.rate));
            }
        }
        Ok(())
    }

    /// Rates `W[a][b]` of population transfer `a -> b` for operators of the form `|b><a|`,
    /// plus diagonal elastic parts.
    pub fn transfer_matrix(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(DIM, DIM);
        for c in &self.channels {
            for a in 0..DIM {
                for b in 0..DIM {
                    w[(a, b)] += c.rate * c.op[(b, a)].norm_sqr();
                }
            }
        }
        w
    }

    /// Decay rate of the coherence `rho[i][j]` from the diagonal parts of all channels.
    pub fn coherence_decay(&self, i: usize, j: usize) -> f64 {
        let mut g = 0.0;
        for c in &self.channels {
            let ldl = c.op.adjoint() * &c.op;
            let di = c.op[(i, i)];
            let dj = c.op[(j, j)];
            g += c.rate * (0.5 * (ldl[(i, i)].re + ldl[(j, j)].re) - (di * dj.conj()).re);
        }
        g
    }
}

/// Detuning of the scattering light from each excited hyperfine level (Hz).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitedDetunings {
    pub f7_2: f64,
    pub f9_2: f64,
    pub f11_2: f64,
}

impl Default for ExcitedDetunings {
    fn default() -> Self {
        Self { f7_2: -1735e6, f9_2: -600e6, f11_2: 863e6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScatteringBudget {
    /// Total scattering rate (elastic and inelastic) of the reference state before the ASE factor.
    PerStateTotal { rate: f64 },
    /// Inelastic transfer out of the reference state after the ASE factor.
    Transfer { rate: f64 },
    /// Transfer of 0.5 s^-1 out of -5/2 after the ASE factor.
    Nominal,
}

pub const NOMINAL_TRANSFER_RATE: f64 = 0.5;
pub const NOMINAL_ASE_FACTOR: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatteringConfig {
    pub budget: ScatteringBudget,
    #[serde(default = "default_ase")]
    pub ase_factor: f64,
    #[serde(default)]
    pub detunings: ExcitedDetunings,
    /// State whose rate the budget refers to.
    #[serde(default = "default_reference_state")]
    pub reference_state: f64,
    /// Overrides the elastic share of each state's total scattering.
    #[serde(default)]
    pub rayleigh_fraction: Option<f64>,
}

fn default_ase() -> f64 {
    NOMINAL_ASE_FACTOR
}

fn default_reference_state() -> f64 {
    -2.5
}

impl ScatteringConfig {
    pub fn nominal() -> Self {
        Self {
            budget: ScatteringBudget::Nominal,
            ase_factor: NOMINAL_ASE_FACTOR,
            detunings: ExcitedDetunings::default(),
            reference_state: -2.5,
            rayleigh_fraction: None,
        }
    }

    /// The same scattering without the amplified-emission pedestal.
    pub fn monochromatic() -> Self {
        Self { budget: ScatteringBudget::Transfer { rate: NOMINAL_TRANSFER_RATE / NOMINAL_ASE_FACTOR }, ase_factor: 1.0, ..Self::nominal() }
    }
}

/// Relative scattering rates `W[m][m']` for pi-polarized excitation through
/// `F' = 7/2, 9/2, 11/2`, summed incoherently.
pub fn scattering_rate_matrix(det: &ExcitedDetunings) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(DIM, DIM);
    for a in 0..DIM {
        let m = projection(a);
        for (fp, d) in [(3.5, det.f7_2), (4.5, det.f9_2), (5.5, det.f11_2)] {
            if m.abs() > fp || d == 0.0 {
                continue;
            }
            let absorb = clebsch_gordan(SPIN, m, 1.0, 0.0, fp, m).powi(2) / (d * d);
            for (b, wb) in (0..DIM).zip(0..DIM) {
                let mp = projection(b);
                let qpol = m - mp;
                if qpol.abs() > 1.0 + 1e-9 {
                    continue;
                }
                w[(a, wb)] += absorb * clebsch_gordan(SPIN, mp, 1.0, qpol, fp, m).powi(2);
            }
        }
    }
    w
}

/// Decay branching ratios from the excited level `|F', m>`; they sum to one.
pub fn decay_branching(fp: f64, m: f64) -> Vec<(f64, f64)> {
    (-1..=1)
        .filter_map(|q| {
            let mp = m - q as f64;
            if mp.abs() > SPIN {
                return None;
            }
            Some((mp, clebsch_gordan(SPIN, mp, 1.0, q as f64, fp, m).powi(2)))
        })
        .collect()
}

/// One jump per scattering branch `m -> m'` and one elastic projector per level.
pub fn photon_scattering_channels(cfg: &ScatteringConfig) -> Result<LindbladSpec> {
    if !(cfg.ase_factor >= 0.0) {
        return Err(Error::NegativeRate(cfg.ase_factor));
    }
    let mut w = scattering_rate_matrix(&cfg.detunings);
    if let Some(f) = cfg.rayleigh_fraction {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("rayleigh fraction {f}")));
        }
        for a in 0..DIM {
            let inel: f64 = (0..DIM).filter(|&b| b != a).map(|b| w[(a, b)]).sum();
            w[(a, a)] = if inel > 0.0 { inel * f / (1.0 - f) } else { w[(a, a)] };
        }
    }
    let r = index_of(cfg.reference_state)?;
    let total_ref: f64 = w.row(r).sum();
    let inel_ref = total_ref - w[(r, r)];
    let scale = match cfg.budget {
        ScatteringBudget::PerStateTotal { rate } => {
            if rate < 0.0 {
                return Err(Error::NegativeRate(rate));
            }
            cfg.ase_factor * rate / total_ref
        }
        ScatteringBudget::Transfer { rate } => {
            if rate < 0.0 {
                return Err(Error::NegativeRate(rate));
            }
            if cfg.ase_factor == 0.0 {
                0.0
            } else {
                rate / inel_ref
            }
        }
        ScatteringBudget::Nominal => {
            if cfg.ase_factor == 0.0 {
                0.0
            } else {
                NOMINAL_TRANSFER_RATE / inel_ref
            }
        }
    };
    let mut spec = LindbladSpec::empty();
    if scale == 0.0 {
        return Ok(spec);
    }
    for a in 0..DIM {
        for b in 0..DIM {
            let rate = scale * w[(a, b)];
            if rate <= 0.0 {
                continue;
            }
            let mut op = CMat::zeros(DIM, DIM);
            op[(b, a)] = C64::from(1.0);
            let label = if a == b {
                format!("elastic {}", projection(a))
            } else {
                format!("raman {} -> {}", projection(a), projection(b))
            };
            spec.channels.push(Channel { label, op, rate, tls_scaled: true });
        }
    }
    Ok(spec)
}

/// 1/e time of the `|dm| = 1` coherences under the empirical dephasing (s).
pub const DEPHASING_TIME: f64 = 0.210;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DephasingScaling {
    /// 1/e time proportional to `|dm|`; best diagonal-channel approximation.
    #[default]
    TimeProportional,
    /// Rate proportional to `|dm|`; exact.
    RateProportional,
    /// Rate proportional to `dm^2` from a single `F_z` channel.
    Quadratic,
}

/// Embedding `x_i` with `|x_i - x_j|^2 ~ 1 / |i - j|`.
fn time_proportional_embedding() -> &'static DMatrix<f64> {
    static CACHE: OnceLock<DMatrix<f64>> = OnceLock::new();
    CACHE.get_or_init(|| {
        let n = DIM;
        let k = n - 1;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let weight = |d: usize| match d {
            1 | 2 => 1e3,
            3 => 10.0,
            _ => 1.0,
        };
        let target = |d: usize| 1.0 / d as f64;
        // classical scaling start
        let g = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { target(i.abs_diff(j)) });
        let c = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let b = &c * g * &c * -0.5;
        let eig = nalgebra::SymmetricEigen::new(b);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &bb| eig.eigenvalues[bb].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut x0 = DVector::zeros(n * k);
        for i in 0..n {
            for (col, &e) in order.iter().take(k).enumerate() {
                x0[i * k + col] = eig.eigenvectors[(i, e)] * eig.eigenvalues[e].max(0.0).sqrt();
            }
        }
        let resid = |x: &DVector<f64>| {
            DVector::from_iterator(
                pairs.len(),
                pairs.iter().map(|&(i, j)| {
                    let d2: f64 = (0..k).map(|c| (x[i * k + c] - x[j * k + c]).powi(2)).sum();
                    weight(j - i) * (d2 - target(j - i))
                }),
            )
        };
        let jac = |x: &DVector<f64>| {
            let mut m = DMatrix::zeros(pairs.len(), n * k);
            for (r, &(i, j)) in pairs.iter().enumerate() {
                let w = weight(j - i);
                for c in 0..k {
                    let diff = 2.0 * (x[i * k + c] - x[j * k + c]) * w;
                    m[(r, i * k + c)] = diff;
                    m[(r, j * k + c)] = -diff;
                }
            }
            m
        };
        let opts = lsq::LmOptions { max_iter: 5000, ..Default::default() };
        let res = lsq::levenberg_marquardt(resid, jac, x0, opts);
        DMatrix::from_fn(n, k, |i, c| res.x[i * k + c])
    })
}

/// Diagonal dephasing with `|dm| = 1` coherences decaying in 210 ms.
///
/// `TimeProportional` is fitted so `|dm| = 1, 2` are exact and `|dm| = 3` is
/// close; larger separations decay faster than the target because no set of
/// diagonal channels can realize `1 / |dm|` rates on ten levels.
pub fn inhomogeneous_dephasing(scaling: DephasingScaling) -> LindbladSpec {
    let g = 1.0 / DEPHASING_TIME;
    let mut spec = LindbladSpec::empty();
    match scaling {
        DephasingScaling::TimeProportional => {
            let x = time_proportional_embedding();
            for c in 0..x.ncols() {
                let op = CMat::from_diagonal(&nalgebra::DVector::from_iterator(DIM, (0..DIM).map(|i| C64::from(x[(i, c)]))));
                spec.channels.push(Channel { label: format!("dephasing mode {c}"), op, rate: 2.0 * g, tls_scaled: true });
            }
        }
        DephasingScaling::RateProportional => {
            for k in 0..DIM - 1 {
                let op = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
                    DIM,
                    (0..DIM).map(|i| C64::from(if i <= k { 1.0 } else { 0.0 })),
                ));
                spec.channels.push(Channel { label: format!("dephasing cut {k}"), op, rate: 2.0 * g, tls_scaled: true });
            }
        }
        DephasingScaling::Quadratic => {
            let (_, _, fz) = spin_operators(SPIN).expect("valid spin");
            spec.channels.push(Channel { label: "dephasing Fz".into(), op: fz, rate: 2.0 * g, tls_scaled: true });
        }
    }
    spec
}

/// Light shift `Omega^2 / (8 q)` of a level neighbouring a pair driven with
/// Rabi frequency `omega`, everything in Hz.
pub fn ac_stark_estimate(omega: f64, q: f64) -> Result<f64> {
    if q == 0.0 {
        return Err(Error::Degenerate("ac stark estimate needs q != 0".into()));
    }
    Ok(omega * omega / (8.0 * q))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coincidence {
    /// Low level of the pair driven by the intended polarization.
    pub minus_low: f64,
    /// Low level of the pair driven by the opposite polarization.
    pub plus_low: f64,
    /// Separation of the two resonances (Hz).
    pub separation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub controlled: bool,
    pub b: f64,
    pub threshold: f64,
    pub coincidences: Vec<Coincidence>,
}

/// `b > |q| (2F - 1)`, listing resonances of the two polarizations that fall
/// within `2|q|` of each other.
pub fn control_regime_check(b: f64, q: f64, f: f64) -> RegimeReport {
    let threshold = q.abs() * (2.0 * f - 1.0);
    let controlled = b > threshold;
    let n = (2.0 * f).round() as usize;
    let split = |m: f64| b + q * (2.0 * m + 1.0);
    let mut coincidences = Vec::new();
    if !controlled {
        for i in 0..n {
            for j in 0..n {
                let (m, mp) = (i as f64 - f, j as f64 - f);
                let sep = (split(m) + split(mp)).abs();
                if sep < (2.0 * q).abs().max(f64::MIN_POSITIVE) {
                    coincidences.push(Coincidence { minus_low: m, plus_low: mp, separation: sep });
                }
            }
        }
    }
    RegimeReport { controlled, b, threshold, coincidences }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin_core::hermiticity_error;

    #[test]
    fn diagonal_entries() {
        let h = diagonal_hamiltonian(&FieldParams::new(960.0, -320.0), 0.0);
        assert!((h[(0, 0)] - (-10800.0)).abs() < 1e-9);
        let flat = diagonal_hamiltonian(&FieldParams::new(500.0, 0.0), 0.0);
        for i in 0..DIM - 1 {
            assert!((flat[(i + 1, i + 1)] - flat[(i, i)] - 500.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacent_resonances_split_by_2q() {
        let s = FieldParams::new(960.0, -320.0).shifts(1.0);
        for l in 0..DIM - 2 {
            let a = s.resonance(Pair::new(projection(l), projection(l + 1)).unwrap());
            let b = s.resonance(Pair::new(projection(l + 1), projection(l + 2)).unwrap());
            assert!(((a - b).abs() - 640.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rwa_coupling_is_half_omega() {
        let tone = RamanTone::resonant(Pair::new(-2.5, -1.5).unwrap(), 71.0);
        let h = raman_hamiltonian(&[tone], &FieldParams::new(960.0, -320.0), Frame::Rotating).unwrap().eval(0.3);
        assert!((h[(2, 3)].norm() - 35.5).abs() < 1e-12);
        assert!(hermiticity_error(&h) < 1e-12);
        // resonant pair is degenerate in the frame
        assert!((h[(2, 2)].re - h[(3, 3)].re).abs() < 1e-9);
    }

    #[test]
    fn no_tones_is_diagonal() {
        let f = FieldParams::new(960.0, -320.0);
        let h = raman_hamiltonian(&[], &f, Frame::Rotating).unwrap().eval(0.0);
        let d = diagonal_hamiltonian(&f, 0.0);
        for i in 0..DIM {
            for j in 0..DIM {
                assert!((h[(i, j)].re - d[(i, j)]).abs() < 1e-12 && h[(i, j)].im == 0.0);
            }
        }
    }

    #[test]
    fn cg_weights_match_leg_product() {
        // oracle from the two dipole legs written out with the Wigner-Eckart
        // factors for <F m|T^1_q|F m'> within F = 9/2
        let f: f64 = 4.5;
        let pi_leg = |m: f64| m / (f * (f + 1.0)).sqrt();
        let minus_leg = |m_up: f64| ((f + m_up) * (f - m_up + 1.0) / (2.0 * f * (f + 1.0))).sqrt();
        let mut tone = RamanTone::resonant(Pair::new(-3.5, -2.5).unwrap(), 10.0);
        tone.coupling.reference = Some(Pair::new(-2.5, -1.5).unwrap());
        let (pairs, _) = tone.driven_pairs();
        let oracle_ref = (pi_leg(-2.5) * minus_leg(-1.5)).abs();
        assert_eq!(pairs.len(), DIM - 1);
        for (l, _, om) in pairs {
            let m = projection(l);
            let o = (pi_leg(m) * minus_leg(m + 1.0)).abs() / oracle_ref * 10.0;
            assert!((om - o).abs() < 1e-12, "{m}: {om} vs {o}");
        }
    }

    #[test]
    fn branching_sums_to_one() {
        for fp in [3.5, 4.5, 5.5] {
            let m = -2.5;
            let s: f64 = decay_branching(fp, m).iter().map(|(_, p)| p).sum();
            assert!((s - 1.0).abs() < 1e-12, "F'={fp}: {s}");
        }
    }

    #[test]
    fn nominal_scattering_profile() {
        let spec = photon_scattering_channels(&ScatteringConfig::nominal()).unwrap();
        let w = spec.transfer_matrix();
        let r = index_of(-2.5).unwrap();
        let out: f64 = (0..DIM).filter(|&b| b != r).map(|b| w[(r, b)]).sum();
        assert!((out - 0.5).abs() < 1e-12);
        let empty = photon_scattering_channels(&ScatteringConfig {
            budget: ScatteringBudget::PerStateTotal { rate: 0.0 },
            ase_factor: 1.0,
            ..ScatteringConfig::nominal()
        })
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn ase_factor_scales_per_state_budget() {
        let base = ScatteringConfig { budget: ScatteringBudget::PerStateTotal { rate: 1.0 }, ase_factor: 1.0, ..ScatteringConfig::nominal() };
        let tripled = ScatteringConfig { ase_factor: 3.0, ..base };
        let a = photon_scattering_channels(&base).unwrap().transfer_matrix();
        let b = photon_scattering_channels(&tripled).unwrap().transfer_matrix();
        assert!((b - a * 3.0).amax() < 1e-12);
    }

    #[test]
    fn dephasing_time_proportional_targets() {
        let spec = inhomogeneous_dephasing(DephasingScaling::TimeProportional);
        let g = |i, j| spec.coherence_decay(i, j);
        assert!((1.0 / g(2, 3) - 0.210).abs() < 1e-6);
        assert!((1.0 / g(1, 3) - 0.420).abs() < 1e-5);
        for i in 0..DIM - 1 {
            assert!((1.0 / g(i, i + 1) - 0.210).abs() < 1e-5);
        }
        for i in 0..DIM - 3 {
            assert!(((1.0 / g(i, i + 3)) / 0.630 - 1.0).abs() < 0.1);
        }
        assert!(spec.channels.iter().all(|c| {
            (0..DIM).all(|i| (0..DIM).all(|j| i == j || c.op[(i, j)].norm() == 0.0))
        }));
    }

    #[test]
    fn dephasing_rate_proportional_exact() {
        let spec = inhomogeneous_dephasing(DephasingScaling::RateProportional);
        for i in 0..DIM {
            for j in i + 1..DIM {
                let want = (j - i) as f64 / 0.210;
                assert!((spec.coherence_decay(i, j) - want).abs() < 1e-9);
            }
        }
        let quad = inhomogeneous_dephasing(DephasingScaling::Quadratic);
        assert!((quad.coherence_decay(0, 2) - 4.0 / 0.210).abs() < 1e-9);
    }

    #[test]
    fn ac_stark_values() {
        assert!((ac_stark_estimate(77.0, -320.0).unwrap() + 2.316).abs() < 1e-3);
        assert_eq!(ac_stark_estimate(0.0, -320.0).unwrap(), 0.0);
        assert!(ac_stark_estimate(1.0, 0.0).is_err());
    }

    #[test]
    fn ac_stark_matches_dressed_shift() {
        // two-level block detuned by 2q with coupling omega/2
        for ratio in [9.0, 20.0, 50.0] {
            let q: f64 = -320.0;
            let omega = 2.0 * q.abs() / ratio;
            let delta = 2.0 * q;
            let exact = delta.signum() * (((delta * delta + omega * omega).sqrt() - delta.abs()) / 2.0);
            let est = ac_stark_estimate(omega, q).unwrap();
            assert!(((est - exact) / exact).abs() < 0.1, "{ratio}: {est} vs {exact}");
        }
    }

    #[test]
    fn control_regime() {
        let r = control_regime_check(960.0, -320.0, 4.5);
        assert!(!r.controlled);
        assert!(!r.coincidences.is_empty());
        assert!(control_regime_check(1.0, 0.0, 4.5).controlled);
        assert!(control_regime_check(2600.0, -320.0, 4.5).controlled);
    }

    #[test]
    fn envelope_areas() {
        let d = 0.01;
        for env in [Envelope::Square, Envelope::LinearRamp { rise: 0.002 }, Envelope::RaisedCosine { rise: 0.005 }] {
            let n = 200_000;
            let num: f64 = (0..n).map(|k| env.value((k as f64 + 0.5) * d / n as f64, d)).sum::<f64>() / n as f64;
            assert!((num - env.area_fraction(d)).abs() < 1e-6, "{env:?}");
        }
    }
}
