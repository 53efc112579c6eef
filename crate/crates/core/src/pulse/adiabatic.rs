use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{propagate, Channel, EvolutionConfig, Evolver, PulseError, PulseSegment, QuantumState, Transition};
use crate::noise::NoiseRealization;
use crate::spin::SpinSystem;

/// Linear-chirp adiabatic passage centred on one transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdiabaticPulse {
    pub transition: Transition,
    /// Drive amplitude in the channel's units (MHz for ESR/NMR, V for EDSR).
    pub amplitude: f64,
    /// Total sweep span, MHz.
    pub span: f64,
    /// Sweep rate, MHz/µs.
    pub sweep_rate: f64,
    /// Offset of the sweep centre from the nominal transition, MHz.
    #[serde(default)]
    pub offset: f64,
}

impl AdiabaticPulse {
    /// Defaults with Landau–Zener exponent above 7 (inversion > 0.999).
    pub fn default_for(transition: Transition) -> Self {
        let (amplitude, span, sweep_rate) = match transition.channel() {
            Channel::Esr => (0.5, 20.0, 0.2),
            Channel::Nmr => (0.02, 1.0, 5e-4),
            Channel::Edsr => (0.4, 2.0, 0.01),
        };
        Self { transition, amplitude, span, sweep_rate, offset: 0.0 }
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.sweep_rate = rate;
        self
    }

    pub fn duration(&self) -> f64 {
        self.span / self.sweep_rate
    }

    /// Rabi frequency on the target transition, MHz.
    pub fn rabi(&self, system: &SpinSystem) -> Result<f64, PulseError> {
        let ev = Evolver::new(system, &NoiseRealization::ideal(), &EvolutionConfig::default())?;
        let (a, b) = self.transition.levels();
        Ok(ev.coupling(self.transition.channel(), a, b).norm() * self.amplitude)
    }

    /// Landau–Zener transfer probability `1 − exp(−π²Ω²/ḟ)` for Rabi
    /// frequency Ω and sweep rate ḟ, both in plain frequency units.
    pub fn landau_zener(&self, system: &SpinSystem) -> Result<f64, PulseError> {
        let omega = self.rabi(system)?;
        Ok(landau_zener(omega, self.sweep_rate))
    }

    pub fn to_segment(&self, system: &SpinSystem) -> Result<PulseSegment, PulseError> {
        if !(self.span > 0.0 && self.sweep_rate > 0.0 && self.amplitude >= 0.0) {
            return Err(PulseError::InvalidSegment(format!(
                "adiabatic pulse needs span > 0 and sweep_rate > 0, got {} and {}",
                self.span, self.sweep_rate
            )));
        }
        let centre = self.transition.frequency(&system.eigensystem()) + self.offset;
        let seg = PulseSegment::chirp(
            (centre - 0.5 * self.span) * 1e-3,
            (centre + 0.5 * self.span) * 1e-3,
            self.amplitude,
            self.duration(),
            self.transition.channel(),
        );
        seg.validate()?;
        Ok(seg)
    }
}

pub(crate) fn landau_zener(omega: f64, rate: f64) -> f64 {
    1.0 - (-PI * PI * omega * omega / rate.abs()).exp()
}

/// Transition addressed by a chirp: the one inside its sweep window, or the
/// closest one on the same channel.
fn target_transition(chirp: &PulseSegment, system: &SpinSystem) -> Result<Transition, PulseError> {
    let PulseSegment::Chirp { f_start, f_end, channel, .. } = *chirp else {
        return Err(PulseError::InvalidSegment("expected a chirp".into()));
    };
    let (lo, hi) = (f_start.min(f_end) * 1e3, f_start.max(f_end) * 1e3);
    let centre = 0.5 * (lo + hi);
    let eig = system.eigensystem();
    Transition::ALL
        .into_iter()
        .filter(|t| t.channel() == channel)
        .min_by(|a, b| {
            let score = |t: &Transition| {
                let f = t.frequency(&eig);
                let inside = (lo..=hi).contains(&f);
                (!inside, (f - centre).abs())
            };
            score(a).partial_cmp(&score(b)).expect("finite frequencies")
        })
        .ok_or_else(|| PulseError::InvalidSegment("no transition on this channel".into()))
}

/// Probability that the chirp transfers the lower level of its target
/// transition to the upper one, by direct propagation.
pub fn adiabatic_inversion_probability(
    chirp: &PulseSegment,
    system: &SpinSystem,
    realization: &NoiseRealization,
    config: &EvolutionConfig,
) -> Result<f64, PulseError> {
    let target = target_transition(chirp, system)?;
    let (lower, upper) = target.ordered_levels(&system.eigensystem());
    let out = propagate(&QuantumState::basis(lower), chirp, system, realization, config)?;
    Ok(out.population(upper))
}

/// Finds the sweep rate at which `base` inverts with probability `target`
/// (±0.005) by bisection on the logarithm of the rate.
pub fn calibrate_half_adiabatic(
    target: f64,
    base: &AdiabaticPulse,
    system: &SpinSystem,
    config: &EvolutionConfig,
) -> Result<(AdiabaticPulse, f64), PulseError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(PulseError::InvalidConfig(format!("target probability must lie in (0, 1), got {target}")));
    }
    const MAX_ITER: usize = 60;
    let real = NoiseRealization::ideal();
    let prob = |rate: f64| -> Result<f64, PulseError> {
        let seg = base.with_rate(rate).to_segment(system)?;
        adiabatic_inversion_probability(&seg, system, &real, config)
    };
    let omega = base.rabi(system)?;
    let guess = PI * PI * omega * omega / -(1.0 - target).ln();
    let (mut lo, mut hi) = (guess / 2.0, guess * 2.0);
    let (mut p_lo, mut p_hi) = (prob(lo)?, prob(hi)?);
    let mut widen = 0;
    while !(p_lo >= target && p_hi <= target) {
        widen += 1;
        if widen > 12 {
            return Err(PulseError::NonConvergence {
                iterations: widen,
                reason: format!("no bracket: P({lo}) = {p_lo}, P({hi}) = {p_hi}"),
            });
        }
        if p_lo < target {
            lo /= 2.0;
            p_lo = prob(lo)?;
        }
        if p_hi > target {
            hi *= 2.0;
            p_hi = prob(hi)?;
        }
    }
    for _ in 0..MAX_ITER {
        let mid = (lo * hi).sqrt();
        let p = prob(mid)?;
        if (p - target).abs() <= 0.005 {
            return Ok((base.with_rate(mid), p));
        }
        if p > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(PulseError::NonConvergence { iterations: MAX_ITER, reason: format!("bracket [{lo}, {hi}] MHz/µs") })
}
