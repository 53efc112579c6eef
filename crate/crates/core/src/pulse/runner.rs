use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Channel, EvolutionConfig, Evolver, PulseError, PulseSegment, PulseSequence, QuantumState};
use crate::measurement::{electron_single_shot, ReadoutParams, ShotRecord};
use crate::noise::{apply_relaxation, depolarize_flipflop, sample_realization, NoiseEnvironment, NoiseRealization};
use crate::spin::SpinSystem;

/// Everything a sequence run needs besides the state and the randomness.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Simulator {
    #[serde(default)]
    pub system: SpinSystem,
    #[serde(default)]
    pub env: NoiseEnvironment,
    #[serde(default)]
    pub readout: ReadoutParams,
    #[serde(default)]
    pub evolution: EvolutionConfig,
}

#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub state: QuantumState,
    pub shots: Vec<ShotRecord>,
    pub realization: NoiseRealization,
    /// Sequence time elapsed, µs.
    pub elapsed: f64,
}

/// Runs `sequence` with a realization drawn once from the environment.
pub fn run_sequence<R: Rng + ?Sized>(
    state: &QuantumState,
    sequence: &PulseSequence,
    sim: &Simulator,
    rng: &mut R,
) -> Result<SequenceOutcome, PulseError> {
    sim.env.validate()?;
    let realization = sample_realization(&sim.env, rng);
    run_sequence_frozen(state, sequence, sim, &realization, rng)
}

/// Runs `sequence` under a given frozen realization. Read markers invoke the
/// single-shot electron readout; delays apply relaxation.
pub fn run_sequence_frozen<R: Rng + ?Sized>(
    state: &QuantumState,
    sequence: &PulseSequence,
    sim: &Simulator,
    realization: &NoiseRealization,
    rng: &mut R,
) -> Result<SequenceOutcome, PulseError> {
    sequence.validate()?;
    state.validate()?;
    let mut ev = Evolver::new(&sim.system, realization, &sim.evolution)?;
    let mut state = state.clone();
    let mut shots = Vec::new();
    for seg in &sequence.segments {
        match seg {
            PulseSegment::ReadMarker => {
                let (mut record, post) = electron_single_shot(&state, &sim.readout, rng);
                record.shot_index = shots.len();
                shots.push(record);
                state = post;
            }
            PulseSegment::Delay { duration } => {
                state = ev.step(&state, seg)?;
                state = apply_relaxation(&state, duration * 1e-6, &sim.env.relaxation, rng);
            }
            PulseSegment::Tone { channel: Channel::Edsr, .. } => {
                state = ev.step(&state, seg)?;
                state = depolarize_flipflop(&state, sim.env.gate_errors.depolarizing);
            }
            _ => state = ev.step(&state, seg)?,
        }
    }
    Ok(SequenceOutcome { state, shots, realization: realization.clone(), elapsed: ev.time() })
}

impl Simulator {
    pub fn new(system: SpinSystem, env: NoiseEnvironment, readout: ReadoutParams, evolution: EvolutionConfig) -> Self {
        Self { system, env, readout, evolution }
    }

    pub fn ideal(system: SpinSystem) -> Self {
        Self { system, readout: ReadoutParams::ideal(), ..Self::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulse::{build_standard_sequence, SequenceParams, StandardKind};
    use crate::rng::stream;
    use crate::spin::{Eigensystem, DOWN_NDOWN, DOWN_NUP, UP_NDOWN};
    use std::f64::consts::PI;

    #[test]
    fn all_delay_sequence_is_identity() {
        let sim = Simulator::ideal(SpinSystem::default());
        let seq = PulseSequence::new("d", vec![PulseSegment::delay(10.0), PulseSegment::delay(3.0)]).unwrap();
        let start = QuantumState::basis(UP_NDOWN);
        let out = run_sequence(&start, &seq, &sim, &mut stream(1, "t", 0)).unwrap();
        assert!((out.state.population(UP_NDOWN) - 1.0).abs() < 1e-12);
        assert!(out.shots.is_empty());
        assert!((out.elapsed - 13.0).abs() < 1e-12);
    }

    #[test]
    fn endor_sequence_initialises_both_branches() {
        let sys = SpinSystem::default();
        let sim = Simulator::ideal(sys);
        let seq = build_standard_sequence(StandardKind::EndorInit, &SequenceParams::default(), &sys).unwrap();
        for start in [DOWN_NDOWN, DOWN_NUP] {
            let out = run_sequence(&QuantumState::basis(start), &seq, &sim, &mut stream(2, "endor", start as u64)).unwrap();
            assert!(out.state.population(DOWN_NUP) > 0.99, "from {start}: {:?}", out.state.populations());
            assert_eq!(out.shots.len(), 1);
            assert_eq!(out.shots[0].blip, start == DOWN_NUP);
        }
    }

    #[test]
    fn ramsey_fringe_follows_frozen_detuning() {
        let sys = SpinSystem::default();
        let sim = Simulator::ideal(sys);
        let eig = sys.eigensystem();
        let amp = 40.0;
        for (delta_khz, tau) in [(25.0, 7.0), (60.0, 3.3), (-40.0, 11.0)] {
            let params = SequenceParams { amplitude: Some(amp), tau: Some(tau), ..SequenceParams::default() };
            let mut seq = build_standard_sequence(StandardKind::Ramsey, &params, &sys).unwrap();
            seq.segments.pop();
            let t_half = seq.segments[0].duration();
            let real = NoiseRealization::with_detuning(delta_khz);
            let out = run_sequence_frozen(&QuantumState::basis(DOWN_NUP), &seq, &sim, &real, &mut stream(3, "r", 0)).unwrap();
            // exact shift of the flip-flop splitting, and the free-precession
            // time each finite π/2 pulse adds
            let shifted = Eigensystem::from_hamiltonian(&(sys.hamiltonian().0 + real.perturbation()))
                .transition(UP_NDOWN, DOWN_NUP)
                - eig.transition(UP_NDOWN, DOWN_NUP);
            let tau_eff = tau + 4.0 * t_half / PI;
            let expect = (PI * shifted * tau_eff).cos().powi(2);
            let got = out.state.population(UP_NDOWN);
            assert!((got - expect).abs() < 1e-3, "{delta_khz}: {got} vs {expect}");
        }
    }
}
