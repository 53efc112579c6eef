//! Single-shot electron readout by spin-dependent tunnelling, QND nuclear
//! readout by repeated shots, flip statistics and ENDOR initialisation.
//!
//! A blip is a Bernoulli event: an ↑ electron tunnels out within the
//! detection window with probability `1 − exp(−Γ_out·window)` and the charge
//! sensor then misses it with `blip_miss_probability`; a ↓ electron gives a
//! spurious blip with `dark_blip_probability`. After every shot the electron
//! is reloaded ↓, except for an optional `reload_error`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Mat4, C64, ONE, ZERO};
use crate::pulse::QuantumState;
use crate::rng::{stream, SimRng};
use crate::spin::{DOWN_NDOWN, DOWN_NUP, UP_NDOWN, UP_NUP};

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("series needs at least 2 entries, got {0}")]
    SeriesTooShort(usize),
    #[error("cannot write shot log: {0}")]
    Io(String),
}

fn zero() -> f64 {
    0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutParams {
    /// ↑ electron tunnelling rate to the island, 1/ms.
    pub tunnel_out_rate: f64,
    /// ↓ electron reload rate, 1/ms.
    pub tunnel_in_rate: f64,
    /// ms.
    pub detection_window: f64,
    pub blip_miss_probability: f64,
    pub dark_blip_probability: f64,
    /// Probability that the reloaded electron is ↑.
    #[serde(default = "zero")]
    pub reload_error: f64,
}

impl Default for ReadoutParams {
    /// Single-shot fidelity ≈ 0.95.
    fn default() -> Self {
        Self {
            tunnel_out_rate: 10.0,
            tunnel_in_rate: 10.0,
            detection_window: 0.3,
            blip_miss_probability: 0.0,
            dark_blip_probability: 0.05,
            reload_error: 0.0,
        }
    }
}

impl ReadoutParams {
    pub fn ideal() -> Self {
        Self {
            tunnel_out_rate: 1e3,
            tunnel_in_rate: 1e3,
            detection_window: 1.0,
            blip_miss_probability: 0.0,
            dark_blip_probability: 0.0,
            reload_error: 0.0,
        }
    }

    /// Readout that reports the wrong electron state with probability
    /// `1 − fidelity` for either spin.
    pub fn symmetric(fidelity: f64) -> Self {
        Self { blip_miss_probability: 1.0 - fidelity, dark_blip_probability: 1.0 - fidelity, ..Self::ideal() }
    }

    pub fn p_blip_up(&self) -> f64 {
        (1.0 - self.blip_miss_probability) * (1.0 - (-self.tunnel_out_rate * self.detection_window).exp())
    }

    pub fn p_blip_down(&self) -> f64 {
        self.dark_blip_probability
    }

    /// Mean of the ↑ and ↓ assignment fidelities.
    pub fn fidelity(&self) -> f64 {
        0.5 * (self.p_blip_up() + 1.0 - self.p_blip_down())
    }

    pub fn validate(&self) -> Result<(), MeasurementError> {
        for (name, v) in [
            ("tunnel_out_rate", self.tunnel_out_rate),
            ("tunnel_in_rate", self.tunnel_in_rate),
            ("detection_window", self.detection_window),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MeasurementError::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, p) in [
            ("blip_miss_probability", self.blip_miss_probability),
            ("dark_blip_probability", self.dark_blip_probability),
            ("reload_error", self.reload_error),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(MeasurementError::InvalidParameter(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub shot_index: usize,
    pub blip: bool,
    pub electron_up_inferred: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuclearSpin {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuclearReadResult {
    pub state: NuclearSpin,
    pub up_proportion: f64,
    pub n_shots: usize,
}

/// Success probabilities of the adiabatic passages used by the readout and
/// initialisation protocols. A failed passage leaves the state untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentFidelities {
    pub aesr: f64,
    pub anmr: f64,
}

impl Default for ComponentFidelities {
    fn default() -> Self {
        Self { aesr: 1.0, anmr: 1.0 }
    }
}

impl ComponentFidelities {
    pub fn validate(&self) -> Result<(), MeasurementError> {
        for (name, p) in [("aesr", self.aesr), ("anmr", self.anmr)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(MeasurementError::InvalidParameter(format!("{name} fidelity must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.45;
pub const DEFAULT_NUCLEAR_SHOTS: usize = 20;

/// Permutation exchanging two levels.
fn swap(a: usize, b: usize) -> Mat4 {
    let mut p = Mat4::identity();
    p[(a, a)] = ZERO;
    p[(b, b)] = ZERO;
    p[(a, b)] = ONE;
    p[(b, a)] = ONE;
    p
}

/// Passage between `a` and `b` that succeeds with probability `fidelity`.
fn stochastic_swap<R: Rng + ?Sized>(state: &QuantumState, a: usize, b: usize, fidelity: f64, rng: &mut R) -> QuantumState {
    if fidelity >= 1.0 || rng.random::<f64>() < fidelity {
        state.apply(&swap(a, b))
    } else {
        state.clone()
    }
}

/// Maps the electron-↑ levels onto the matching ↓ levels.
fn reload(state: &QuantumState) -> QuantumState {
    let mut m = Mat4::zeros();
    m[(DOWN_NUP, UP_NUP)] = ONE;
    m[(DOWN_NDOWN, UP_NDOWN)] = ONE;
    state.apply(&m)
}

/// One electron shot: projective electron measurement, Bernoulli blip, reload.
pub fn electron_single_shot<R: Rng + ?Sized>(
    state: &QuantumState,
    params: &ReadoutParams,
    rng: &mut R,
) -> (ShotRecord, QuantumState) {
    let p_up = state.electron_up().clamp(0.0, 1.0);
    let up = rng.random::<f64>() < p_up;
    let projected = if up {
        state.project(|j| j == UP_NUP || j == UP_NDOWN)
    } else {
        state.project(|j| j == DOWN_NUP || j == DOWN_NDOWN)
    }
    .unwrap_or_else(|| state.clone());
    let p_blip = if up { params.p_blip_up() } else { params.p_blip_down() };
    let blip = rng.random::<f64>() < p_blip;
    let mut post = if up { reload(&projected) } else { projected };
    if params.reload_error > 0.0 {
        let rho = post.density_matrix();
        let flipped = swap(UP_NUP, DOWN_NUP) * swap(UP_NDOWN, DOWN_NDOWN);
        let rho_err = flipped * rho * flipped.adjoint();
        let r = C64::from(params.reload_error);
        post = QuantumState::Mixed(rho * (ONE - r) + rho_err * r);
    }
    (ShotRecord { shot_index: 0, blip, electron_up_inferred: blip }, post)
}

/// QND nuclear readout: `n_shots` repetitions of a conditional aESR2
/// inversion followed by an electron shot. ⇑ is assigned when the blip
/// proportion exceeds `threshold`.
pub fn nuclear_read<R: Rng + ?Sized>(
    state: &QuantumState,
    n_shots: usize,
    threshold: f64,
    params: &ReadoutParams,
    components: &ComponentFidelities,
    rng: &mut R,
) -> (NuclearReadResult, QuantumState) {
    let n = n_shots.max(1);
    let mut state = state.clone();
    let mut blips = 0usize;
    for _ in 0..n {
        state = stochastic_swap(&state, DOWN_NUP, UP_NUP, components.aesr, rng);
        let (rec, post) = electron_single_shot(&state, params, rng);
        blips += rec.blip as usize;
        state = post;
    }
    let up_proportion = blips as f64 / n as f64;
    let spin = if up_proportion > threshold { NuclearSpin::Up } else { NuclearSpin::Down };
    (NuclearReadResult { state: spin, up_proportion, n_shots: n }, state)
}

/// Fraction of consecutive samples whose nuclear state differs.
pub fn flip_probability(series: &[NuclearSpin]) -> Result<f64, MeasurementError> {
    if series.len() < 2 {
        return Err(MeasurementError::SeriesTooShort(series.len()));
    }
    let flips = series.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(flips as f64 / (series.len() - 1) as f64)
}

/// ENDOR initialisation to ↓⇑: aESR2, aNMR1, then an electron shot that
/// reloads the ↑⇑ branch.
pub fn endor_initialize<R: Rng + ?Sized>(
    state: &QuantumState,
    components: &ComponentFidelities,
    params: &ReadoutParams,
    rng: &mut R,
) -> QuantumState {
    let s = stochastic_swap(state, DOWN_NUP, UP_NUP, components.aesr, rng);
    let s = stochastic_swap(&s, DOWN_NDOWN, DOWN_NUP, components.anmr, rng);
    electron_single_shot(&s, params, rng).1
}

/// Fraction of `trials` nuclear reads of a definite nuclear state that are
/// misassigned. Trial `i` draws from its own stream, so the result does not
/// depend on thread scheduling.
pub fn misclassification_rate(
    nuclear_up: bool,
    n_shots: usize,
    threshold: f64,
    params: &ReadoutParams,
    components: &ComponentFidelities,
    trials: usize,
    seed: u64,
) -> f64 {
    let start = QuantumState::basis(if nuclear_up { DOWN_NUP } else { DOWN_NDOWN });
    let want = if nuclear_up { NuclearSpin::Up } else { NuclearSpin::Down };
    let wrong: usize = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng: SimRng = stream(seed, "nuclear-read", i as u64);
            let (r, _) = nuclear_read(&start, n_shots, threshold, params, components, &mut rng);
            (r.state != want) as usize
        })
        .sum();
    wrong as f64 / trials.max(1) as f64
}

/// Writes `shot_index,blip,electron_up_inferred` rows.
pub fn write_shot_log<W: Write>(records: &[ShotRecord], writer: W) -> Result<(), MeasurementError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r).map_err(|e| MeasurementError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| MeasurementError::Io(e.to_string()))
}
