//! Pulse segments, sequences and the propagator that drives a donor state
//! through them.
//!
//! Time is in µs and frequencies in MHz inside the propagator; segment carrier
//! frequencies are given in GHz at the API boundary. States are carried in the
//! interaction frame of the nominal (noise-free, undriven) Hamiltonian and in
//! its eigenbasis, whose states are labelled by the product states they connect
//! to. Populations of a [`QuantumState`] are therefore what an adiabatic
//! readout measures, whichever frame the evolution was integrated in.

mod adiabatic;
mod engine;
mod runner;
mod standard;
mod state;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::NoiseError;
use crate::spin::{Eigensystem, SpinError, DOWN_NDOWN, DOWN_NUP, UP_NDOWN, UP_NUP};

pub use adiabatic::{adiabatic_inversion_probability, calibrate_half_adiabatic, AdiabaticPulse};
pub use engine::{propagate, segment_propagator, Evolver};
pub use runner::{run_sequence, run_sequence_frozen, SequenceOutcome, Simulator};
pub use standard::{build_standard_sequence, SequenceParams, StandardKind};
pub use state::{Preparation, QuantumState};

#[derive(Debug, Error, PartialEq)]
pub enum PulseError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("pulse sequence has no segments")]
    EmptySequence,
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
    #[error("dt_max = {dt_max} µs is too coarse; frequencies up to {f_max} MHz need dt <= {required} µs")]
    StepTooCoarse { dt_max: f64, f_max: f64, required: f64 },
    #[error("segment needs {steps} steps, above the limit of {limit}")]
    StepBudget { steps: u64, limit: u64 },
    #[error("missing parameter `{0}`")]
    MissingParameter(&'static str),
    #[error("no convergence after {iterations} iterations: {reason}")]
    NonConvergence { iterations: usize, reason: String },
    #[error("cannot parse sequence: {0}")]
    Parse(String),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Spin(#[from] SpinError),
}

/// Physical coupling used by a drive segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Oscillating magnetic field along x acting on the electron; amplitude is
    /// the bare electron Rabi frequency in MHz.
    Esr,
    /// Oscillating magnetic field along x acting on the nucleus; amplitude is
    /// the bare nuclear Rabi frequency in MHz.
    Nmr,
    /// Gate-voltage modulation of the hyperfine coupling; amplitude is the
    /// voltage at the gate in V.
    Edsr,
}

/// Named transitions between the four levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// Electron flip with nucleus ⇓.
    Esr1,
    /// Electron flip with nucleus ⇑.
    Esr2,
    /// Nuclear flip with electron ↓.
    Nmr1,
    /// Nuclear flip with electron ↑.
    Nmr2,
    /// `↑⇓ ↔ ↓⇑`.
    FlipFlop,
}

impl Transition {
    pub const ALL: [Transition; 5] =
        [Transition::Esr1, Transition::Esr2, Transition::Nmr1, Transition::Nmr2, Transition::FlipFlop];

    /// The two levels connected, in no particular energy order.
    pub fn levels(self) -> (usize, usize) {
        match self {
            Transition::Esr1 => (UP_NDOWN, DOWN_NDOWN),
            Transition::Esr2 => (UP_NUP, DOWN_NUP),
            Transition::Nmr1 => (DOWN_NDOWN, DOWN_NUP),
            Transition::Nmr2 => (UP_NUP, UP_NDOWN),
            Transition::FlipFlop => (UP_NDOWN, DOWN_NUP),
        }
    }

    pub fn channel(self) -> Channel {
        match self {
            Transition::Esr1 | Transition::Esr2 => Channel::Esr,
            Transition::Nmr1 | Transition::Nmr2 => Channel::Nmr,
            Transition::FlipFlop => Channel::Edsr,
        }
    }

    /// Transition frequency in MHz (always positive).
    pub fn frequency(self, eig: &Eigensystem) -> f64 {
        let (a, b) = self.levels();
        eig.transition(a, b).abs()
    }

    /// `(lower, upper)` level by energy.
    pub fn ordered_levels(self, eig: &Eigensystem) -> (usize, usize) {
        let (a, b) = self.levels();
        if eig.energies[a] <= eig.energies[b] {
            (a, b)
        } else {
            (b, a)
        }
    }
}

fn default_zero() -> f64 {
    0.0
}

/// One element of a pulse sequence.
///
/// Carrier frequencies are in GHz, durations in µs, phases in radians. The
/// drive waveform of a tone is `amplitude·cos(2π·f·t − phase)` with `t` the
/// global sequence clock, so consecutive tones are phase coherent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PulseSegment {
    Tone {
        frequency: f64,
        amplitude: f64,
        #[serde(default = "default_zero")]
        phase: f64,
        duration: f64,
        channel: Channel,
    },
    /// Linear frequency sweep; the phase is referenced to the sweep start.
    Chirp {
        f_start: f64,
        f_end: f64,
        amplitude: f64,
        duration: f64,
        channel: Channel,
        #[serde(default = "default_zero")]
        phase: f64,
    },
    Delay {
        duration: f64,
    },
    /// Single-shot electron readout (and reload).
    ReadMarker,
}

impl PulseSegment {
    pub fn tone(frequency: f64, amplitude: f64, phase: f64, duration: f64, channel: Channel) -> Self {
        PulseSegment::Tone { frequency, amplitude, phase, duration, channel }
    }

    pub fn chirp(f_start: f64, f_end: f64, amplitude: f64, duration: f64, channel: Channel) -> Self {
        PulseSegment::Chirp { f_start, f_end, amplitude, duration, channel, phase: 0.0 }
    }

    pub fn delay(duration: f64) -> Self {
        PulseSegment::Delay { duration }
    }

    /// Duration in µs (zero for a read marker).
    pub fn duration(&self) -> f64 {
        match self {
            PulseSegment::Tone { duration, .. }
            | PulseSegment::Chirp { duration, .. }
            | PulseSegment::Delay { duration } => *duration,
            PulseSegment::ReadMarker => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PulseError> {
        let bad = |m: String| Err(PulseError::InvalidSegment(m));
        let d = self.duration();
        if !matches!(self, PulseSegment::ReadMarker) && !(d > 0.0 && d.is_finite()) {
            return bad(format!("duration must be > 0, got {d}"));
        }
        match self {
            PulseSegment::Tone { frequency, amplitude, phase, .. } => {
                if !(*frequency > 0.0 && frequency.is_finite()) {
                    return bad(format!("tone frequency must be > 0, got {frequency}"));
                }
                if !(*amplitude >= 0.0 && amplitude.is_finite()) || !phase.is_finite() {
                    return bad(format!("tone amplitude must be >= 0, got {amplitude}"));
                }
            }
            PulseSegment::Chirp { f_start, f_end, amplitude, phase, .. } => {
                if !(f_start.is_finite() && f_end.is_finite() && *f_start > 0.0 && *f_end > 0.0) {
                    return bad("chirp frequencies must be positive".into());
                }
                if f_start == f_end {
                    return bad("chirp needs f_start != f_end".into());
                }
                if !(*amplitude >= 0.0 && amplitude.is_finite()) || !phase.is_finite() {
                    return bad(format!("chirp amplitude must be >= 0, got {amplitude}"));
                }
            }
            PulseSegment::Delay { .. } | PulseSegment::ReadMarker => {}
        }
        Ok(())
    }
}

/// Ordered list of segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSequence {
    #[serde(default)]
    pub label: String,
    pub segments: Vec<PulseSegment>,
}

impl PulseSequence {
    pub fn new(label: impl Into<String>, segments: Vec<PulseSegment>) -> Result<Self, PulseError> {
        let s = Self { label: label.into(), segments };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PulseError> {
        if self.segments.is_empty() {
            return Err(PulseError::EmptySequence);
        }
        self.segments.iter().try_for_each(PulseSegment::validate)
    }

    /// Total duration in µs.
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(PulseSegment::duration).sum()
    }

    pub fn count(&self, pred: impl Fn(&PulseSegment) -> bool) -> usize {
        self.segments.iter().filter(|s| pred(s)).count()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PulseError> {
        let s: Self = toml::from_str(text).map_err(|e| PulseError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml_string(&self) -> Result<String, PulseError> {
        toml::to_string(self).map_err(|e| PulseError::Parse(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self, PulseError> {
        let s: Self = serde_json::from_str(text).map_err(|e| PulseError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json_string(&self) -> Result<String, PulseError> {
        serde_json::to_string_pretty(self).map_err(|e| PulseError::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Lab,
    Rotating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    /// Fourth-order commutator-free Magnus steps built from exact exponentials.
    PiecewiseExponential,
    /// Classical Runge–Kutta steps of the Schrödinger equation.
    FixedStepExpansion,
}

fn default_cutoff() -> f64 {
    10.0
}

fn default_max_steps() -> u64 {
    20_000_000
}

fn default_rwa() -> bool {
    true
}

/// Numerical settings of the propagator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    pub frame: Frame,
    #[serde(default = "default_rwa")]
    pub rwa: bool,
    /// Largest step in µs. `None` picks `1/(50·f_max)` from the fastest
    /// frequency present in the chosen frame.
    #[serde(default)]
    pub dt_max: Option<f64>,
    pub integrator: Integrator,
    /// Under the RWA, terms rotating faster than this (MHz) are dropped.
    #[serde(default = "default_cutoff")]
    pub secular_cutoff: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            frame: Frame::Rotating,
            rwa: true,
            dt_max: None,
            integrator: Integrator::PiecewiseExponential,
            secular_cutoff: default_cutoff(),
            max_steps: default_max_steps(),
        }
    }
}

impl EvolutionConfig {
    /// Rotating frame without the RWA: every term kept.
    pub fn rotating_exact() -> Self {
        Self { rwa: false, ..Self::default() }
    }

    pub fn lab() -> Self {
        Self { frame: Frame::Lab, rwa: false, ..Self::default() }
    }

    pub fn with_dt_max(mut self, dt: f64) -> Self {
        self.dt_max = Some(dt);
        self
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn validate(&self) -> Result<(), PulseError> {
        if let Some(dt) = self.dt_max {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(PulseError::InvalidConfig(format!("dt_max must be > 0, got {dt}")));
            }
        }
        if self.frame == Frame::Lab && self.rwa {
            return Err(PulseError::InvalidConfig("the RWA needs the rotating frame".into()));
        }
        if !(self.secular_cutoff > 0.0) {
            return Err(PulseError::InvalidConfig(format!("secular_cutoff must be > 0, got {}", self.secular_cutoff)));
        }
        if self.max_steps == 0 {
            return Err(PulseError::InvalidConfig("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_validation() {
        assert!(PulseSegment::delay(0.0).validate().is_err());
        assert!(PulseSegment::delay(-1.0).validate().is_err());
        assert!(PulseSegment::chirp(28.0, 28.0, 0.1, 1.0, Channel::Esr).validate().is_err());
        assert!(PulseSegment::tone(28.0, 0.1, 0.0, 1.0, Channel::Edsr).validate().is_ok());
        assert!(PulseSegment::ReadMarker.validate().is_ok());
        assert_eq!(PulseSequence::new("x", vec![]), Err(PulseError::EmptySequence));
    }

    #[test]
    fn sequence_round_trips_through_toml_and_json() {
        let seq = PulseSequence::new(
            "demo",
            vec![
                PulseSegment::tone(28.0966, 0.3, 0.5, 3.0, Channel::Edsr),
                PulseSegment::chirp(27.98, 27.99, 0.5, 40.0, Channel::Esr),
                PulseSegment::delay(10.0),
                PulseSegment::ReadMarker,
            ],
        )
        .unwrap();
        let text = seq.to_toml_string().unwrap();
        assert_eq!(PulseSequence::from_toml_str(&text).unwrap(), seq);
        let js = seq.to_json_string().unwrap();
        assert_eq!(PulseSequence::from_json_str(&js).unwrap(), seq);
    }

    #[test]
    fn hand_written_toml_parses() {
        let text = r#"
            label = "rabi"
            [[segments]]
            type = "tone"
            frequency = 28.0966
            amplitude = 0.4
            duration = 4.2
            channel = "edsr"
            [[segments]]
            type = "read_marker"
        "#;
        let seq = PulseSequence::from_toml_str(text).unwrap();
        assert_eq!(seq.segments.len(), 2);
        let bad = text.replace("amplitude = 0.4", "amplitude = 0.4\nvolume = 3");
        assert!(matches!(PulseSequence::from_toml_str(&bad), Err(PulseError::Parse(_))));
    }

    #[test]
    fn config_validation() {
        assert!(EvolutionConfig::default().validate().is_ok());
        assert!(EvolutionConfig::default().with_dt_max(0.0).validate().is_err());
        let lab_rwa = EvolutionConfig { frame: Frame::Lab, ..EvolutionConfig::default() };
        assert!(lab_rwa.validate().is_err());
        assert!(EvolutionConfig::lab().validate().is_ok());
    }
}
