//! Pulse sequences and their compilation into piecewise Hamiltonians.
//!
//! A single oscillator defines the frame. Its frequency may jump between
//! segments, but its phase is continuous, so later pulses keep a fixed phase
//! relation to earlier ones.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dynamics::{run_steps_density, run_steps_pure, Step, Tolerances, Trajectory};
use crate::error::{Error, Result};
use crate::model::{build_piece, control_regime_check, Coupling, Detuning, Envelope, FieldParams, Frame, FrameState, HamiltonianPiece, LindbladSpec, RamanTone};
use crate::spin_core::{pair_rotation, Axis, CMat, DensityMatrix, Pair, SpinState, SPIN};

fn one() -> f64 {
    1.0
}

/// A timed stretch with fixed tones and a linear light-shift ramp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSegment {
    pub duration: f64,
    #[serde(default)]
    pub tones: Vec<RamanTone>,
    /// Frame oscillator; defaults to the first tone's, then to the previous segment's.
    #[serde(default)]
    pub lo: Option<Detuning>,
    #[serde(default = "one")]
    pub tls_start: f64,
    #[serde(default = "one")]
    pub tls_end: f64,
    #[serde(default)]
    pub label: String,
}

impl PulseSegment {
    pub fn dark(duration: f64) -> Self {
        Self { duration, tones: vec![], lo: None, tls_start: 1.0, tls_end: 1.0, label: "dark".into() }
    }

    pub fn with_lo(mut self, lo: Detuning) -> Self {
        self.lo = Some(lo);
        self
    }

    pub fn with_tls(mut self, start: f64, end: f64) -> Self {
        self.tls_start = start;
        self.tls_end = end;
        self
    }

    pub fn labelled(mut self, label: &str) -> Self {
        self.label = label.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::InvalidArgument(format!("segment duration {}", self.duration)));
        }
        for v in [self.tls_start, self.tls_end] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("tls multiplier {v} outside [0, 1]")));
            }
        }
        for t in &self.tones {
            t.validate()?;
            t.envelope.validate(self.duration)?;
        }
        if let Some(Detuning::Track { pair, .. }) = self.lo {
            pair.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Item {
    Segment(PulseSegment),
    /// Ideal instantaneous `exp(-i angle sigma^z_pair / 2)`.
    VirtualZ { pair: Pair, angle: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSequence {
    pub fields: FieldParams,
    pub items: Vec<Item>,
    #[serde(default)]
    pub frame: Frame,
    #[serde(default)]
    pub seed: u64,
}

impl PulseSequence {
    pub fn new(fields: FieldParams) -> Self {
        Self { fields, items: Vec::new(), frame: Frame::Rotating, seed: 0 }
    }

    pub fn push(&mut self, seg: PulseSegment) -> &mut Self {
        self.items.push(Item::Segment(seg));
        self
    }

    pub fn push_z(&mut self, pair: Pair, angle: f64) -> &mut Self {
        self.items.push(Item::VirtualZ { pair, angle });
        self
    }

    pub fn duration(&self) -> f64 {
        self.items
            .iter()
            .map(|i| match i {
                Item::Segment(s) => s.duration,
                Item::VirtualZ { .. } => 0.0,
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.fields.validate()?;
        if self.items.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        for it in &self.items {
            match it {
                Item::Segment(s) => s.validate()?,
                Item::VirtualZ { pair, angle } => {
                    pair.validate()?;
                    if !angle.is_finite() {
                        return Err(Error::InvalidArgument("non-finite phase".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy with every oscillator pinned to the frequency it has under the
    /// current fields, so the fields can then be changed without moving them.
    pub fn freeze_detunings(&self) -> PulseSequence {
        let mut out = self.clone();
        for it in out.items.iter_mut() {
            if let Item::Segment(s) = it {
                let s0 = self.fields.shifts(s.tls_start);
                let s1 = self.fields.shifts(s.tls_end);
                if let Some(lo) = s.lo {
                    let own = s.tones.first().map(|x| x.pair).unwrap_or(Pair { low: -SPIN, high: -SPIN + 1.0 });
                    let (a, b) = (lo.rate(&s0, own), lo.rate(&s1, own));
                    if a == b {
                        s.lo = Some(Detuning::Fixed(a));
                    }
                }
                if s.lo.is_none() {
                    if let Some(t) = s.tones.first() {
                        let (a, b) = (t.detuning.rate(&s0, t.pair), t.detuning.rate(&s1, t.pair));
                        if a == b {
                            s.lo = Some(Detuning::Fixed(a));
                        }
                    }
                }
                for t in s.tones.iter_mut() {
                    let (a, b) = (t.detuning.rate(&s0, t.pair), t.detuning.rate(&s1, t.pair));
                    if a == b {
                        t.detuning = Detuning::Fixed(a);
                    }
                }
            }
        }
        out
    }

    /// One line per item, for audit logs.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut t = 0.0;
        for it in &self.items {
            match it {
                Item::Segment(s) => {
                    let tones: Vec<String> = s
                        .tones
                        .iter()
                        .map(|x| format!("{} omega={:.6} phase={:.6} detuning={:?} envelope={:?}", x.pair, x.omega, x.phase, x.detuning, x.envelope))
                        .collect();
                    out.push_str(&format!(
                        "t={:.9} dur={:.9} tls={:.3}->{:.3} lo={:?} label={} tones=[{}]\n",
                        t,
                        s.duration,
                        s.tls_start,
                        s.tls_end,
                        s.lo,
                        s.label,
                        tones.join("; ")
                    ));
                    t += s.duration;
                }
                Item::VirtualZ { pair, angle } => out.push_str(&format!("t={t:.9} virtual_z {pair} angle={angle:.9}\n")),
            }
        }
        out
    }
}

/// Piecewise Hamiltonian plus the light-shift schedule that scales dissipation.
#[derive(Clone, Debug)]
pub struct Compiled {
    pub steps: Vec<Step>,
    pub duration: f64,
}

impl Compiled {
    fn piece_at(&self, t: f64) -> Option<&HamiltonianPiece> {
        self.steps.iter().find_map(|s| match s {
            Step::Evolve(p) if t >= p.t0 && t < p.t1 => Some(p),
            _ => None,
        })
    }

    pub fn hamiltonian(&self, t: f64) -> Option<CMat> {
        self.piece_at(t).map(|p| p.eval(t))
    }

    /// Multiplier applied to light-shift-scaled channel rates at `t`.
    pub fn dissipation_scale(&self, t: f64) -> Option<f64> {
        self.piece_at(t).map(|p| p.tls(t))
    }
}

pub fn compile(seq: &PulseSequence) -> Result<Compiled> {
    seq.validate()?;
    let mut steps = Vec::new();
    let mut t = 0.0;
    let mut lo_cycles = 0.0;
    let mut prev_lo: Option<Detuning> = None;
    for it in &seq.items {
        match it {
            Item::VirtualZ { pair, angle } => {
                steps.push(Step::Instant { t, unitary: pair_rotation(*pair, Axis::Z, *angle) });
            }
            Item::Segment(s) => {
                let lo = s.lo.or_else(|| s.tones.first().map(|x| as_track(x.detuning, x.pair))).or(prev_lo).unwrap_or(Detuning::Fixed(0.0));
                // an inherited oscillator keeps its frequency; it does not follow the shifts
                let s0 = seq.fields.shifts(s.tls_start);
                let s1 = seq.fields.shifts(s.tls_end);
                let own = s.tones.first().map(|x| x.pair).unwrap_or(Pair { low: -SPIN, high: -SPIN + 1.0 });
                let lo0 = lo.rate(&s0, own);
                let lo1 = lo.rate(&s1, own);
                let fs = FrameState { frame: seq.frame, lo0, lo1, lo_cycles };
                let piece = build_piece(&s.tones, &s0, &s1, t, t + s.duration, fs, s.tls_start, s.tls_end);
                steps.push(Step::Evolve(piece));
                lo_cycles += 0.5 * (lo0 + lo1) * s.duration;
                t += s.duration;
                prev_lo = Some(Detuning::Fixed(lo1));
            }
        }
    }
    Ok(Compiled { steps, duration: t })
}

fn as_track(d: Detuning, own: Pair) -> Detuning {
    match d {
        Detuning::Resonant { offset } => Detuning::Track { pair: own, offset },
        other => other,
    }
}

/// Square resonant pulse of area `theta` about an equatorial axis at `phase`.
/// Negative areas flip the phase by pi.
pub fn rotation_pulse(pair: Pair, omega: f64, theta: f64, phase: f64, fields: &FieldParams) -> Result<PulseSegment> {
    rotation_pulse_with(pair, omega, theta, phase, Coupling::default(), fields)
}

/// As [`rotation_pulse`], with `omega` quoted on the coupling's reference pair.
pub fn rotation_pulse_with(pair: Pair, omega: f64, theta: f64, phase: f64, coupling: Coupling, fields: &FieldParams) -> Result<PulseSegment> {
    if !(omega > 0.0) {
        return Err(Error::InvalidArgument(format!("rabi frequency {omega} must be positive")));
    }
    let report = control_regime_check(fields.b, fields.q, SPIN);
    if !report.controlled {
        log::warn!("b = {} Hz does not exceed |q|(2F-1) = {} Hz; off-resonant transfers are possible", fields.b, report.threshold);
    }
    let (area, ph) = if theta < 0.0 { (-theta, phase + PI) } else { (theta, phase) };
    let mut tone = RamanTone::resonant(pair, omega);
    tone.phase = ph;
    tone.coupling = coupling;
    tone.validate()?;
    let rabi = tone.target_omega();
    if !(rabi > 0.0) {
        return Err(Error::InvalidArgument(format!("pair {pair} is not driven")));
    }
    Ok(PulseSegment {
        duration: area / (2.0 * PI * rabi),
        tones: vec![tone],
        lo: None,
        tls_start: 1.0,
        tls_end: 1.0,
        label: format!("rot {pair} {theta:.6}"),
    })
}

pub fn pi_pulse(pair: Pair, omega: f64, fields: &FieldParams) -> Result<PulseSegment> {
    rotation_pulse(pair, omega, PI, 0.0, fields)
}

pub fn pi_half_pulse(pair: Pair, omega: f64, fields: &FieldParams) -> Result<PulseSegment> {
    rotation_pulse(pair, omega, PI / 2.0, 0.0, fields)
}

/// Pulse of area `theta` with a given edge shape; the duration is stretched so
/// the envelope integral matches the square pulse.
pub fn shaped_pulse(pair: Pair, omega: f64, theta: f64, envelope: Envelope, fields: &FieldParams) -> Result<PulseSegment> {
    let mut seg = rotation_pulse(pair, omega, theta, 0.0, fields)?;
    let base = seg.duration;
    let duration = match envelope {
        Envelope::Square => base,
        Envelope::LinearRamp { rise } | Envelope::RaisedCosine { rise } => base + rise,
    };
    seg.duration = duration;
    seg.tones[0].envelope = envelope;
    seg.validate()?;
    Ok(seg)
}

/// Adiabatic light-shift ramp without tones.
pub fn tls_ramp(duration: f64, from: f64, to: f64) -> PulseSegment {
    PulseSegment { duration, tones: vec![], lo: None, tls_start: from, tls_end: to, label: "tls ramp".into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Pure,
    Density,
}

#[derive(Clone, Debug)]
pub enum RunOutput {
    Pure(Trajectory<SpinState>),
    Density(Trajectory<DensityMatrix>),
}

impl RunOutput {
    pub fn times(&self) -> &[f64] {
        match self {
            RunOutput::Pure(t) => &t.times,
            RunOutput::Density(t) => &t.times,
        }
    }

    pub fn populations(&self) -> Vec<Vec<f64>> {
        match self {
            RunOutput::Pure(t) => t.states.iter().map(|s| s.populations()).collect(),
            RunOutput::Density(t) => t.states.iter().map(|s| s.populations()).collect(),
        }
    }

    pub fn final_density(&self) -> DensityMatrix {
        match self {
            RunOutput::Pure(t) => t.last().density(),
            RunOutput::Density(t) => t.last().clone(),
        }
    }
}

/// Evolves `initial` through the sequence, sampling at `samples` (always
/// including the end point).
pub fn run(seq: &PulseSequence, initial: &SpinState, engine: Engine, lindblad: &LindbladSpec, tol: &Tolerances, samples: &[f64]) -> Result<RunOutput> {
    let c = compile(seq)?;
    match engine {
        Engine::Pure => {
            if !lindblad.is_empty() {
                return Err(Error::InvalidArgument("pure engine cannot apply dissipation".into()));
            }
            Ok(RunOutput::Pure(run_steps_pure(initial, &c.steps, tol, samples)?))
        }
        Engine::Density => Ok(RunOutput::Density(run_steps_density(&initial.density(), &c.steps, lindblad, tol, samples)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::steps_propagator;
    use crate::model::Coupling;
    use crate::spin_core::{C64, DIM};

    fn fields() -> FieldParams {
        FieldParams::new(960.0, -320.0)
    }

    #[test]
    fn pi_half_duration() {
        let p = pi_half_pulse(Pair::new(-2.5, -1.5).unwrap(), 93.0, &fields()).unwrap();
        assert!((p.duration - 0.25 / 93.0).abs() < 1e-15);
    }

    #[test]
    fn two_pi_pulses_return_with_sign() {
        let pair = Pair::new(-2.5, -1.5).unwrap();
        let mut seq = PulseSequence::new(fields());
        let mut p = pi_pulse(pair, 71.0, &fields()).unwrap();
        p.tones[0].coupling = Coupling::target_only();
        seq.push(p.clone()).push(p);
        let out = run(&seq, &SpinState::basis(-2.5).unwrap(), Engine::Pure, &LindbladSpec::empty(), &Tolerances::default(), &[]).unwrap();
        let RunOutput::Pure(tr) = out else { panic!() };
        assert!((tr.last().amplitude(-2.5).unwrap().norm() - 1.0).abs() < 1e-10);
        let u = steps_propagator(&compile(&seq).unwrap().steps, &Tolerances::default()).unwrap();
        let (l, h) = pair.indices();
        let c = compile(&seq).unwrap();
        let Step::Evolve(p) = &c.steps[0] else { panic!() };
        let free = C64::from_polar(1.0, -2.0 * PI * p.diag0[l] * c.duration);
        assert!((u[(l, l)] + free).norm() < 1e-8);
        assert!((u[(h, h)] + free).norm() < 1e-8);
        assert!(u[(l, h)].norm() < 1e-8);
    }

    #[test]
    fn shaped_pulse_matches_square_area() {
        let pair = Pair::new(-2.5, -1.5).unwrap();
        let f = fields();
        let mut sq = pi_half_pulse(pair, 71.0, &f).unwrap();
        sq.tones[0].coupling = Coupling::target_only();
        let mut rc = shaped_pulse(pair, 71.0, PI / 2.0, Envelope::RaisedCosine { rise: 0.001 }, &f).unwrap();
        rc.tones[0].coupling = Coupling::target_only();
        let pop = |seg: PulseSegment| {
            let mut seq = PulseSequence::new(f.clone());
            seq.push(seg);
            run(&seq, &SpinState::basis(-2.5).unwrap(), Engine::Pure, &LindbladSpec::empty(), &Tolerances::default(), &[]).unwrap().populations().last().unwrap()[3]
        };
        assert!((pop(sq) - pop(rc)).abs() < 1e-6);
    }

    #[test]
    fn dark_segment_without_tls_is_free() {
        let mut seq = PulseSequence::new(fields());
        seq.push(PulseSegment::dark(0.01).with_tls(0.0, 0.0));
        let c = compile(&seq).unwrap();
        let h = c.hamiltonian(0.005).unwrap();
        for i in 0..DIM {
            for j in 0..DIM {
                if i != j {
                    assert_eq!(h[(i, j)].norm(), 0.0);
                }
            }
        }
        // q = 0: only the linear ladder remains
        let d: Vec<f64> = (0..DIM).map(|i| h[(i, i)].re).collect();
        for w in d.windows(3) {
            assert!((w[2] - 2.0 * w[1] + w[0]).abs() < 1e-9);
        }
        assert_eq!(c.dissipation_scale(0.005), Some(0.0));
    }

    #[test]
    fn boundaries_change_only_declared_terms() {
        let pair = Pair::new(-2.5, -1.5).unwrap();
        let mut seq = PulseSequence::new(fields());
        seq.push(pi_half_pulse(pair, 71.0, &fields()).unwrap()).push(PulseSegment::dark(0.002));
        let c = compile(&seq).unwrap();
        let tb = 0.25 / 71.0;
        let before = c.hamiltonian(tb * (1.0 - 1e-12)).unwrap();
        let after = c.hamiltonian(tb * (1.0 + 1e-12)).unwrap();
        for i in 0..DIM {
            assert!((before[(i, i)] - after[(i, i)]).norm() < 1e-9);
        }
        assert!((before[(2, 3)].norm() - 35.5).abs() < 1e-9);
        assert_eq!(after[(2, 3)].norm(), 0.0);
        assert!((c.duration - (tb + 0.002)).abs() < 1e-15);
    }

    #[test]
    fn dump_has_one_line_per_item() {
        let mut seq = PulseSequence::new(fields());
        seq.push(PulseSegment::dark(0.001)).push_z(Pair::new(-2.5, -1.5).unwrap(), 0.3).push(PulseSegment::dark(0.002));
        assert_eq!(seq.dump().lines().count(), 3);
    }
}
