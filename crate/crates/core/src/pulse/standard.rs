use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{AdiabaticPulse, Channel, EvolutionConfig, Evolver, PulseError, PulseSegment, PulseSequence, Transition};
use crate::noise::NoiseRealization;
use crate::spin::{SpinSystem, DOWN_NUP, UP_NDOWN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardKind {
    EndorInit,
    NuclearRead,
    EdsrRabi,
    Ramsey,
    HahnEcho,
    T1ffPump,
    SpectrumScan,
}

impl StandardKind {
    pub const ALL: [StandardKind; 7] = [
        StandardKind::EndorInit,
        StandardKind::NuclearRead,
        StandardKind::EdsrRabi,
        StandardKind::Ramsey,
        StandardKind::HahnEcho,
        StandardKind::T1ffPump,
        StandardKind::SpectrumScan,
    ];
}

fn one() -> usize {
    1
}

fn edsr() -> Channel {
    Channel::Edsr
}

/// Knobs of the standard sequences. Only the fields a kind needs are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceParams {
    /// Drive amplitude (V for EDSR, MHz for ESR/NMR).
    #[serde(default)]
    pub amplitude: Option<f64>,
    /// EDSR π-pulse length, µs; derived from `amplitude` when absent.
    #[serde(default)]
    pub pi_duration: Option<f64>,
    /// Free evolution time, µs.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Pulse length for Rabi and spectrum scans, µs.
    #[serde(default)]
    pub duration: Option<f64>,
    /// Drive detuning from the nominal flip-flop resonance, MHz.
    #[serde(default)]
    pub detuning: f64,
    /// Total pumping time, s.
    #[serde(default)]
    pub wait: Option<f64>,
    /// Pump period, s.
    #[serde(default)]
    pub period: Option<f64>,
    /// Carrier frequencies of a spectrum scan, GHz.
    #[serde(default)]
    pub frequencies: Option<Vec<f64>>,
    #[serde(default = "edsr")]
    pub channel: Channel,
    /// Electron shots per nuclear read.
    #[serde(default = "one")]
    pub n_shots: usize,
    /// ½aESR1 passage; the Landau–Zener estimate is used when absent.
    #[serde(default)]
    pub half_pulse: Option<AdiabaticPulse>,
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self {
            amplitude: None,
            pi_duration: None,
            tau: None,
            duration: None,
            detuning: 0.0,
            wait: None,
            period: None,
            frequencies: None,
            channel: Channel::Edsr,
            n_shots: 1,
            half_pulse: None,
        }
    }
}

/// Flip-flop Rabi frequency in MHz for gate amplitude `amplitude` (V), from
/// the eigenstate matrix element of the drive.
pub(crate) fn flipflop_rabi(system: &SpinSystem, amplitude: f64) -> Result<f64, PulseError> {
    let ev = Evolver::new(system, &NoiseRealization::ideal(), &EvolutionConfig::default())?;
    Ok(ev.coupling(Channel::Edsr, UP_NDOWN, DOWN_NUP).norm() * amplitude)
}

struct FlipFlopPulses {
    frequency: f64,
    amplitude: f64,
    pi: f64,
}

impl FlipFlopPulses {
    fn new(p: &SequenceParams, system: &SpinSystem) -> Result<Self, PulseError> {
        let amplitude = p.amplitude.ok_or(PulseError::MissingParameter("amplitude"))?;
        let pi = match p.pi_duration {
            Some(d) => d,
            None => 0.5 / flipflop_rabi(system, amplitude)?,
        };
        let frequency = (Transition::FlipFlop.frequency(&system.eigensystem()) + p.detuning) * 1e-3;
        Ok(Self { frequency, amplitude, pi })
    }

    fn rotation(&self, fraction: f64, phase: f64) -> PulseSegment {
        PulseSegment::tone(self.frequency, self.amplitude, phase, self.pi * fraction, Channel::Edsr)
    }
}

fn nuclear_read(system: &SpinSystem, n_shots: usize) -> Result<Vec<PulseSegment>, PulseError> {
    let cx = AdiabaticPulse::default_for(Transition::Esr2).to_segment(system)?;
    Ok((0..n_shots.max(1)).flat_map(|_| [cx.clone(), PulseSegment::ReadMarker]).collect())
}

pub fn build_standard_sequence(
    kind: StandardKind,
    params: &SequenceParams,
    system: &SpinSystem,
) -> Result<PulseSequence, PulseError> {
    let segments = match kind {
        StandardKind::EndorInit => vec![
            AdiabaticPulse::default_for(Transition::Esr2).to_segment(system)?,
            AdiabaticPulse::default_for(Transition::Nmr1).to_segment(system)?,
            PulseSegment::ReadMarker,
        ],
        StandardKind::NuclearRead => nuclear_read(system, params.n_shots)?,
        StandardKind::EdsrRabi => {
            let amplitude = params.amplitude.ok_or(PulseError::MissingParameter("amplitude"))?;
            let duration = params.duration.ok_or(PulseError::MissingParameter("duration"))?;
            let f = (Transition::FlipFlop.frequency(&system.eigensystem()) + params.detuning) * 1e-3;
            vec![PulseSegment::tone(f, amplitude, 0.0, duration, Channel::Edsr), PulseSegment::ReadMarker]
        }
        StandardKind::Ramsey => {
            let tau = params.tau.ok_or(PulseError::MissingParameter("tau"))?;
            let ff = FlipFlopPulses::new(params, system)?;
            vec![ff.rotation(0.5, 0.0), PulseSegment::delay(tau), ff.rotation(0.5, 0.0), PulseSegment::ReadMarker]
        }
        StandardKind::HahnEcho => {
            let tau = params.tau.ok_or(PulseError::MissingParameter("tau"))?;
            let ff = FlipFlopPulses::new(params, system)?;
            vec![
                ff.rotation(0.5, 0.0),
                PulseSegment::delay(0.5 * tau),
                ff.rotation(1.0, 0.0),
                PulseSegment::delay(0.5 * tau),
                ff.rotation(0.5, 0.0),
                PulseSegment::ReadMarker,
            ]
        }
        StandardKind::T1ffPump => {
            let wait = params.wait.ok_or(PulseError::MissingParameter("wait"))?;
            let period = params.period.ok_or(PulseError::MissingParameter("period"))?;
            if !(wait > 0.0 && period > 0.0) {
                return Err(PulseError::InvalidSegment(format!("wait and period must be > 0, got {wait}, {period}")));
            }
            let full = AdiabaticPulse::default_for(Transition::Esr1);
            let half = match params.half_pulse {
                Some(h) => h,
                None => {
                    let omega = full.rabi(system)?;
                    full.with_rate(PI * PI * omega * omega / 2f64.ln())
                }
            };
            let inversions = (wait / period + 1e-9).floor() as usize;
            let mut segs = vec![half.to_segment(system)?];
            let inv = full.to_segment(system)?;
            for _ in 0..inversions {
                segs.push(PulseSegment::delay(period * 1e6));
                segs.push(inv.clone());
            }
            let rest = wait - inversions as f64 * period;
            if rest > 1e-9 * period {
                segs.push(PulseSegment::delay(rest * 1e6));
            }
            segs.push(PulseSegment::ReadMarker);
            segs.extend(nuclear_read(system, params.n_shots)?);
            segs
        }
        StandardKind::SpectrumScan => {
            let freqs = params.frequencies.as_ref().ok_or(PulseError::MissingParameter("frequencies"))?;
            let amplitude = params.amplitude.ok_or(PulseError::MissingParameter("amplitude"))?;
            let duration = params.duration.ok_or(PulseError::MissingParameter("duration"))?;
            freqs
                .iter()
                .flat_map(|f| [PulseSegment::tone(*f, amplitude, 0.0, duration, params.channel), PulseSegment::ReadMarker])
                .collect()
        }
    };
    let label = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    PulseSequence::new(label, segments)
}
