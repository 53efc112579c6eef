//! Noise environment: relaxation, dephasing, the ²⁹Si bath and the empirical
//! pulse-induced resonance shift (PIRS) models.
//!
//! An [`NoiseEnvironment`] is an immutable description. Per shot it is sampled
//! into a frozen [`NoiseRealization`] (quasi-static contract: nothing inside a
//! realization changes while a pulse sequence runs). Slow processes that evolve
//! between shots, the ²⁹Si configuration and telegraph fluctuators, are carried
//! by a [`NoiseSampler`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{basis, Mat4, Vec4, C64, ONE, ZERO};
use crate::pulse::QuantumState;
use crate::spin::{DOWN_NDOWN, DOWN_NUP, UP_NDOWN, UP_NUP};

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("configuration has {config} spins but {couplings} couplings")]
    LengthMismatch { config: usize, couplings: usize },
    #[error("invalid noise parameter {field}: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("PIRS amplitude {amplitude} V matches no table row (rows: {rows:?})")]
    AmplitudeOutsideTable { amplitude: f64, rows: Vec<f64> },
}

/// Serialises infinite lifetimes as the string `"inf"` so JSON snapshots stay valid.
mod lifetime {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t.eq_ignore_ascii_case("inf") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {t:?}"))),
        }
    }
}

fn infinite() -> f64 {
    f64::INFINITY
}

/// Relaxation times in seconds. Infinite means the channel is off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxationRates {
    #[serde(with = "lifetime", default = "infinite")]
    pub t1e: f64,
    #[serde(with = "lifetime", default = "infinite")]
    pub t1ff: f64,
    #[serde(with = "lifetime", default = "infinite")]
    pub t1n: f64,
}

impl Default for RelaxationRates {
    fn default() -> Self {
        Self::none()
    }
}

impl RelaxationRates {
    pub fn none() -> Self {
        Self { t1e: f64::INFINITY, t1ff: f64::INFINITY, t1n: f64::INFINITY }
    }

    /// T₁e = 6.45 s, T₁ff = 173 s, no nuclear relaxation.
    pub fn measured() -> Self {
        Self { t1e: 6.45, t1ff: 173.0, t1n: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        for (name, v) in [("t1e", self.t1e), ("t1ff", self.t1ff), ("t1n", self.t1n)] {
            if !(v > 0.0) {
                return Err(NoiseError::InvalidParameter { field: name, reason: format!("must be > 0, got {v}") });
            }
        }
        Ok(())
    }

    fn rate(t: f64) -> f64 {
        if t.is_finite() {
            1.0 / t
        } else {
            0.0
        }
    }

    pub fn electron_rate(&self) -> f64 {
        Self::rate(self.t1e)
    }

    pub fn flipflop_rate(&self) -> f64 {
        Self::rate(self.t1ff)
    }

    pub fn nuclear_rate(&self) -> f64 {
        Self::rate(self.t1n)
    }

    pub fn is_none(&self) -> bool {
        self.electron_rate() == 0.0 && self.flipflop_rate() == 0.0 && self.nuclear_rate() == 0.0
    }

    /// Jump channels `(from, to, rate in 1/s)`.
    pub fn channels(&self) -> [(usize, usize, f64); 4] {
        [
            (UP_NDOWN, DOWN_NDOWN, self.electron_rate()),
            (UP_NUP, DOWN_NUP, self.electron_rate()),
            (UP_NDOWN, DOWN_NUP, self.flipflop_rate()),
            (DOWN_NDOWN, DOWN_NUP, self.nuclear_rate()),
        ]
    }

    /// Total decay rate out of each level.
    pub fn level_rates(&self) -> [f64; 4] {
        let mut g = [0.0; 4];
        for (from, _, r) in self.channels() {
            g[from] += r;
        }
        g
    }
}

/// One symmetric two-state fluctuator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelegraphComponent {
    /// Detuning is ±amplitude, kHz.
    pub amplitude: f64,
    /// Switching rate, 1/s.
    pub switching_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DephasingModel {
    /// Standard deviation of the per-shot Gaussian detuning, kHz.
    #[serde(default)]
    pub quasi_static_sigma: f64,
    #[serde(default)]
    pub telegraph: Vec<TelegraphComponent>,
}

impl DephasingModel {
    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(self.quasi_static_sigma >= 0.0) {
            return Err(NoiseError::InvalidParameter {
                field: "quasi_static_sigma",
                reason: format!("must be >= 0, got {}", self.quasi_static_sigma),
            });
        }
        for t in &self.telegraph {
            if !(t.switching_rate > 0.0) {
                return Err(NoiseError::InvalidParameter {
                    field: "telegraph.switching_rate",
                    reason: format!("must be > 0, got {}", t.switching_rate),
                });
            }
        }
        Ok(())
    }
}

/// Hyperfine-coupled ²⁹Si spins acting as a classical field on the electron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Si29Bath {
    /// Contact couplings, kHz.
    pub couplings: Vec<f64>,
    /// Per-spin flip rate, 1/s.
    pub flip_rate: f64,
    /// Optional starting configuration; drawn uniformly when absent.
    #[serde(default)]
    pub current_config: Option<Vec<i8>>,
}

impl Si29Bath {
    /// A₁ = 260 kHz, A₂ = A₃ = 85 kHz.
    pub fn measured(flip_rate: f64) -> Self {
        Self { couplings: vec![260.0, 85.0, 85.0], flip_rate, current_config: None }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if self.couplings.iter().any(|a| !(*a >= 0.0)) {
            return Err(NoiseError::InvalidParameter { field: "si29.couplings", reason: "must be >= 0".into() });
        }
        if !(self.flip_rate >= 0.0) {
            return Err(NoiseError::InvalidParameter {
                field: "si29.flip_rate",
                reason: format!("must be >= 0, got {}", self.flip_rate),
            });
        }
        if let Some(cfg) = &self.current_config {
            if cfg.len() != self.couplings.len() {
                return Err(NoiseError::LengthMismatch { config: cfg.len(), couplings: self.couplings.len() });
            }
            if cfg.iter().any(|s| *s != 1 && *s != -1) {
                return Err(NoiseError::InvalidParameter { field: "si29.current_config", reason: "entries must be ±1".into() });
            }
        }
        Ok(())
    }

    /// All 2ⁿ resonance offsets, kHz.
    pub fn enumerate_offsets(&self) -> Vec<f64> {
        let n = self.couplings.len();
        (0..(1u64 << n))
            .map(|mask| {
                let cfg: Vec<i8> = (0..n).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect();
                si29_offset(&cfg, &self.couplings).expect("lengths match")
            })
            .collect()
    }
}

/// One row of the saturating EDSR shift table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdsrShiftRow {
    /// Drive amplitude at the source, V.
    pub amplitude: f64,
    /// Saturated shift, kHz.
    pub delta_f_a: f64,
    /// Saturation time, µs.
    pub tau_sat: f64,
    /// Offset at zero duration, kHz.
    pub delta_f_0: f64,
}

/// Empirical pulse-induced resonance shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PirsModel {
    /// Linear ESR shift per volt of electric drive, kHz/V.
    pub esr_slope_per_volt: f64,
    /// Linear ESR shift per µs of electric drive, Hz/µs.
    pub esr_slope_per_us: f64,
    pub edsr_params: Vec<EdsrShiftRow>,
    /// Interpolate linearly between rows (δf_A, δf₀ and 1/τ_sat).
    #[serde(default)]
    pub interpolate: bool,
    /// Amplitude tolerance for matching a row, V.
    #[serde(default = "default_row_tolerance")]
    pub row_tolerance: f64,
}

fn default_row_tolerance() -> f64 {
    0.05
}

impl Default for PirsModel {
    /// Slopes 50.5 kHz/V and 219 Hz/µs; rows at 1.84 V and 0.97 V.
    fn default() -> Self {
        Self {
            esr_slope_per_volt: 50.5,
            esr_slope_per_us: 219.0,
            edsr_params: vec![
                EdsrShiftRow { amplitude: 1.84, delta_f_a: 94.8, tau_sat: 284.0, delta_f_0: 2.1 },
                EdsrShiftRow { amplitude: 0.97, delta_f_a: 20.4, tau_sat: 93.0, delta_f_0: -4.7 },
            ],
            interpolate: false,
            row_tolerance: default_row_tolerance(),
        }
    }
}

impl PirsModel {
    pub fn validate(&self) -> Result<(), NoiseError> {
        for r in &self.edsr_params {
            if !(r.tau_sat > 0.0) {
                return Err(NoiseError::InvalidParameter {
                    field: "pirs.edsr_params.tau_sat",
                    reason: format!("must be > 0, got {}", r.tau_sat),
                });
            }
        }
        Ok(())
    }

    fn row_for(&self, amplitude: f64) -> Result<EdsrShiftRow, NoiseError> {
        let outside = || NoiseError::AmplitudeOutsideTable {
            amplitude,
            rows: self.edsr_params.iter().map(|r| r.amplitude).collect(),
        };
        if let Some(r) = self
            .edsr_params
            .iter()
            .filter(|r| (r.amplitude - amplitude).abs() <= self.row_tolerance)
            .min_by(|a, b| (a.amplitude - amplitude).abs().total_cmp(&(b.amplitude - amplitude).abs()))
        {
            return Ok(*r);
        }
        if !self.interpolate {
            return Err(outside());
        }
        let mut rows = self.edsr_params.clone();
        rows.sort_by(|a, b| a.amplitude.total_cmp(&b.amplitude));
        let pair = rows.windows(2).find(|w| w[0].amplitude <= amplitude && amplitude <= w[1].amplitude);
        let Some([lo, hi]) = pair.map(|w| [w[0], w[1]]) else {
            return Err(outside());
        };
        let t = (amplitude - lo.amplitude) / (hi.amplitude - lo.amplitude);
        let lerp = |a: f64, b: f64| a + t * (b - a);
        Ok(EdsrShiftRow {
            amplitude,
            delta_f_a: lerp(lo.delta_f_a, hi.delta_f_a),
            tau_sat: 1.0 / lerp(1.0 / lo.tau_sat, 1.0 / hi.tau_sat),
            delta_f_0: lerp(lo.delta_f_0, hi.delta_f_0),
        })
    }
}

/// Coherent and stochastic gate errors injected on top of the physical model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateErrorModel {
    /// Average infidelity `r` of the depolarizing channel applied after every
    /// EDSR gate (channel strength λ = 2r on the qubit subspace).
    #[serde(default)]
    pub depolarizing: f64,
    /// Multiplier on the calibrated rotation angle; 0.4955/0.5 reproduces the
    /// under-rotation found by tomography.
    #[serde(default = "unit")]
    pub rotation_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for GateErrorModel {
    fn default() -> Self {
        Self { depolarizing: 0.0, rotation_scale: 1.0 }
    }
}

/// Full description of the noise a simulated device sees.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEnvironment {
    #[serde(default)]
    pub relaxation: RelaxationRates,
    #[serde(default)]
    pub dephasing: DephasingModel,
    #[serde(default)]
    pub si29: Option<Si29Bath>,
    #[serde(default)]
    pub pirs: Option<PirsModel>,
    #[serde(default)]
    pub gate_errors: GateErrorModel,
}

impl NoiseEnvironment {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        self.relaxation.validate()?;
        self.dephasing.validate()?;
        if let Some(b) = &self.si29 {
            b.validate()?;
        }
        if let Some(p) = &self.pirs {
            p.validate()?;
        }
        let g = &self.gate_errors;
        if !(0.0..=0.5).contains(&g.depolarizing) {
            return Err(NoiseError::InvalidParameter {
                field: "gate_errors.depolarizing",
                reason: format!("must lie in [0, 0.5], got {}", g.depolarizing),
            });
        }
        Ok(())
    }
}

/// Approximate frequency offsets of each transition implied by a realization, kHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransitionOffsets {
    pub esr1: f64,
    pub esr2: f64,
    pub nmr1: f64,
    pub nmr2: f64,
    pub ff: f64,
}

/// Frozen per-shot noise sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseRealization {
    quasi_static: f64,
    telegraph: f64,
    si29: f64,
    hyperfine: f64,
    si29_config: Vec<i8>,
    jump_seed: u64,
    pirs: Option<PirsModel>,
}

impl Default for NoiseRealization {
    fn default() -> Self {
        Self::ideal()
    }
}

impl NoiseRealization {
    /// No offsets at all.
    pub fn ideal() -> Self {
        Self { quasi_static: 0.0, telegraph: 0.0, si29: 0.0, hyperfine: 0.0, si29_config: Vec::new(), jump_seed: 0, pirs: None }
    }

    /// Same realization with pulse-induced shifts enabled.
    pub fn with_pirs(mut self, model: PirsModel) -> Self {
        self.pirs = Some(model);
        self
    }

    pub fn pirs(&self) -> Option<&PirsModel> {
        self.pirs.as_ref()
    }

    /// Realization with a fixed electron-Zeeman detuning, kHz.
    pub fn with_detuning(detuning_khz: f64) -> Self {
        Self { quasi_static: detuning_khz, ..Self::ideal() }
    }

    /// Realization with a fixed hyperfine offset, kHz.
    pub fn with_hyperfine_offset(offset_khz: f64) -> Self {
        Self { hyperfine: offset_khz, ..Self::ideal() }
    }

    /// Total shift of the electron Zeeman energy, kHz.
    pub fn electron_zeeman_offset(&self) -> f64 {
        self.quasi_static + self.telegraph + self.si29
    }

    /// Shift of the hyperfine coupling, kHz.
    pub fn hyperfine_offset(&self) -> f64 {
        self.hyperfine
    }

    pub fn si29_offset(&self) -> f64 {
        self.si29
    }

    pub fn si29_config(&self) -> &[i8] {
        &self.si29_config
    }

    pub fn quasi_static_offset(&self) -> f64 {
        self.quasi_static
    }

    pub fn jump_seed(&self) -> u64 {
        self.jump_seed
    }

    /// Secular first-order offsets of each transition.
    pub fn transition_offsets(&self) -> TransitionOffsets {
        let e = self.electron_zeeman_offset();
        let a = self.hyperfine;
        TransitionOffsets { esr1: e - 0.5 * a, esr2: e + 0.5 * a, nmr1: 0.5 * a, nmr2: 0.5 * a, ff: e }
    }

    /// Static Hamiltonian perturbation in the product basis, MHz.
    pub fn perturbation(&self) -> Mat4 {
        let ops = crate::spin::SpinOperators::new();
        ops.sz * C64::from(self.electron_zeeman_offset() * 1e-3) + ops.contact() * C64::from(self.hyperfine * 1e-3)
    }

    pub fn is_ideal(&self) -> bool {
        self.electron_zeeman_offset() == 0.0 && self.hyperfine == 0.0
    }
}

/// `Σᵢ sᵢ·Aᵢ/2` for spin signs `sᵢ = ±1`, kHz.
pub fn si29_offset(config: &[i8], couplings: &[f64]) -> Result<f64, NoiseError> {
    if config.len() != couplings.len() {
        return Err(NoiseError::LengthMismatch { config: config.len(), couplings: couplings.len() });
    }
    Ok(config.iter().zip(couplings).map(|(s, a)| f64::from(*s) * 0.5 * a).sum())
}

/// Saturating EDSR resonance shift after `duration` µs of drive, kHz.
pub fn pirs_edsr_shift(amplitude: f64, duration: f64, model: &PirsModel) -> Result<f64, NoiseError> {
    let row = model.row_for(amplitude)?;
    Ok(row.delta_f_a * (1.0 - (-duration / row.tau_sat).exp()) + row.delta_f_0)
}

/// Linear ESR resonance shift, kHz. Amplitude and duration contributions add.
pub fn pirs_esr_shift(amplitude: f64, duration: f64, model: &PirsModel) -> f64 {
    model.esr_slope_per_volt * amplitude + model.esr_slope_per_us * 1e-3 * duration
}

/// Total electron relaxation time `1/(1/T₁e + 1/T₁ff)`, seconds.
pub fn combined_t1(rates: &RelaxationRates) -> f64 {
    1.0 / (rates.electron_rate() + rates.flipflop_rate())
}

/// Stochastic jump evolution over `dt` seconds (pure states), or the exact
/// Lindblad relaxation map (mixed states).
pub fn apply_relaxation<R: Rng + ?Sized>(state: &QuantumState, dt: f64, rates: &RelaxationRates, rng: &mut R) -> QuantumState {
    if dt <= 0.0 || rates.is_none() {
        return state.clone();
    }
    match state {
        QuantumState::Pure(v) => QuantumState::Pure(jump_trajectory(*v, dt, rates, rng)),
        QuantumState::Mixed(rho) => QuantumState::Mixed(relax_density_matrix(rho, dt, rates)),
    }
}

fn no_jump_norm(c2: &[f64; 4], g: &[f64; 4], t: f64) -> f64 {
    (0..4).map(|k| c2[k] * (-g[k] * t).exp()).sum()
}

fn jump_trajectory<R: Rng + ?Sized>(mut v: Vec4, mut remaining: f64, rates: &RelaxationRates, rng: &mut R) -> Vec4 {
    let g = rates.level_rates();
    loop {
        let c2: [f64; 4] = std::array::from_fn(|k| v[k].norm_sqr());
        let u: f64 = rng.random();
        let end = no_jump_norm(&c2, &g, remaining);
        if end > u {
            for k in 0..4 {
                v[k] *= (-0.5 * g[k] * remaining).exp();
            }
            return v / C64::from(end.sqrt());
        }
        // bisection on the monotone no-jump norm for the jump time
        let (mut lo, mut hi) = (0.0, remaining);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if no_jump_norm(&c2, &g, mid) > u {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * remaining {
                break;
            }
        }
        let t_jump = 0.5 * (lo + hi);
        let weights: Vec<(usize, f64)> = rates
            .channels()
            .iter()
            .filter(|(_, _, r)| *r > 0.0)
            .map(|(from, to, r)| (*to, c2[*from] * (-g[*from] * t_jump).exp() * r))
            .collect();
        let total: f64 = weights.iter().map(|w| w.1).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut target = weights.last().map(|w| w.0).unwrap_or(DOWN_NUP);
        for (to, w) in &weights {
            if pick < *w {
                target = *to;
                break;
            }
            pick -= w;
        }
        v = basis(target);
        remaining -= t_jump;
        if remaining <= 0.0 {
            return v;
        }
    }
}

/// `(e^{-a t} − e^{-b t}) / (b − a)` with its `a = b` limit.
fn transfer(a: f64, b: f64, t: f64) -> f64 {
    if (b - a).abs() < 1e-12 * (a.abs() + b.abs()).max(1e-300) {
        t * (-a * t).exp()
    } else {
        ((-a * t).exp() - (-b * t).exp()) / (b - a)
    }
}

/// Closed-form solution of the population rate equations.
pub fn rate_equation_populations(p: [f64; 4], dt: f64, rates: &RelaxationRates) -> [f64; 4] {
    let g = rates.level_rates();
    let k_e = rates.electron_rate();
    let k_ff = rates.flipflop_rate();
    let mut out = [0.0; 4];
    out[UP_NUP] = p[UP_NUP] * (-g[UP_NUP] * dt).exp();
    out[UP_NDOWN] = p[UP_NDOWN] * (-g[UP_NDOWN] * dt).exp();
    out[DOWN_NDOWN] = p[DOWN_NDOWN] * (-g[DOWN_NDOWN] * dt).exp() + p[UP_NDOWN] * k_e * transfer(g[UP_NDOWN], g[DOWN_NDOWN], dt);
    let _ = k_ff;
    out[DOWN_NUP] = 1.0 - out[UP_NUP] - out[UP_NDOWN] - out[DOWN_NDOWN];
    out
}

fn relax_density_matrix(rho: &Mat4, dt: f64, rates: &RelaxationRates) -> Mat4 {
    let g = rates.level_rates();
    let p: [f64; 4] = std::array::from_fn(|k| rho[(k, k)].re);
    let pops = rate_equation_populations(p, dt, rates);
    let mut out = Mat4::zeros();
    for j in 0..4 {
        for k in 0..4 {
            out[(j, k)] = if j == k {
                C64::from(pops[j])
            } else {
                rho[(j, k)] * (-0.5 * (g[j] + g[k]) * dt).exp()
            };
        }
    }
    out
}

/// Evolving bath state shared by consecutive shots.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    env: NoiseEnvironment,
    si29_config: Vec<i8>,
    telegraph_states: Vec<i8>,
    initialised: bool,
}

fn flip_probability(rate: f64, elapsed: f64) -> f64 {
    0.5 * (1.0 - (-2.0 * rate * elapsed).exp())
}

impl NoiseSampler {
    pub fn new(env: &NoiseEnvironment) -> Self {
        let si29_config = env.si29.as_ref().and_then(|b| b.current_config.clone()).unwrap_or_default();
        Self { env: env.clone(), si29_config, telegraph_states: Vec::new(), initialised: false }
    }

    pub fn environment(&self) -> &NoiseEnvironment {
        &self.env
    }

    pub fn si29_config(&self) -> &[i8] {
        &self.si29_config
    }

    fn initialise<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if let Some(bath) = &self.env.si29 {
            if self.si29_config.len() != bath.couplings.len() {
                self.si29_config = bath.couplings.iter().map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
            }
        }
        self.telegraph_states =
            self.env.dephasing.telegraph.iter().map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        self.initialised = true;
    }

    /// Advances slow processes by `elapsed` seconds without sampling.
    pub fn advance<R: Rng + ?Sized>(&mut self, elapsed: f64, rng: &mut R) {
        if !self.initialised {
            self.initialise(rng);
        }
        if elapsed <= 0.0 {
            return;
        }
        if let Some(bath) = &self.env.si29 {
            let p = flip_probability(bath.flip_rate, elapsed);
            for s in &mut self.si29_config {
                if p > 0.0 && rng.random::<f64>() < p {
                    *s = -*s;
                }
            }
        }
        for (s, comp) in self.telegraph_states.iter_mut().zip(&self.env.dephasing.telegraph) {
            let p = flip_probability(comp.switching_rate, elapsed);
            if rng.random::<f64>() < p {
                *s = -*s;
            }
        }
    }

    /// Advances by `elapsed` seconds and freezes a realization for the next shot.
    pub fn sample<R: Rng + ?Sized>(&mut self, elapsed: f64, rng: &mut R) -> NoiseRealization {
        self.advance(elapsed, rng);
        let sigma = self.env.dephasing.quasi_static_sigma;
        let quasi_static = if sigma > 0.0 { Normal::new(0.0, sigma).expect("sigma > 0").sample(rng) } else { 0.0 };
        let telegraph = self
            .telegraph_states
            .iter()
            .zip(&self.env.dephasing.telegraph)
            .map(|(s, c)| f64::from(*s) * c.amplitude)
            .sum();
        let si29 = match &self.env.si29 {
            Some(b) => si29_offset(&self.si29_config, &b.couplings).expect("config sized from couplings"),
            None => 0.0,
        };
        NoiseRealization {
            quasi_static,
            telegraph,
            si29,
            hyperfine: 0.0,
            si29_config: self.si29_config.clone(),
            jump_seed: rng.random(),
            pirs: self.env.pirs.clone(),
        }
    }
}

/// Fresh realization with the bath drawn from its stationary distribution
/// (or its configured current state).
pub fn sample_realization<R: Rng + ?Sized>(env: &NoiseEnvironment, rng: &mut R) -> NoiseRealization {
    NoiseSampler::new(env).sample(0.0, rng)
}

/// Depolarizing channel of average gate infidelity `r` on the flip-flop
/// subspace `{↑⇓, ↓⇑}`: that block goes to `(1 − λ)ρ + λ·tr(ρ)·I/2` with
/// λ = 2r, coherences with the other levels shrink by `1 − λ`.
pub fn depolarize_flipflop(state: &QuantumState, r: f64) -> QuantumState {
    if r <= 0.0 {
        return state.clone();
    }
    let lambda = C64::from((2.0 * r).min(1.0));
    let mut rho = state.density_matrix();
    let q = [UP_NDOWN, DOWN_NUP];
    let inside = |j: usize| q.contains(&j);
    let tr = rho[(UP_NDOWN, UP_NDOWN)] + rho[(DOWN_NUP, DOWN_NUP)];
    for j in 0..4 {
        for k in 0..4 {
            if inside(j) || inside(k) {
                rho[(j, k)] *= ONE - lambda;
            }
        }
    }
    for j in q {
        rho[(j, j)] += lambda * tr * 0.5;
    }
    QuantumState::Mixed(rho)
}

/// Empty Hamiltonian perturbation, for callers that need a zero matrix.
pub fn zero_perturbation() -> Mat4 {
    Mat4::from_element(ZERO)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    #[test]
    fn si29_offsets_enumerate_to_six_values() {
        assert_eq!(si29_offset(&[1, 1, 1], &[260.0, 85.0, 85.0]).unwrap(), 215.0);
        assert_eq!(si29_offset(&[1, -1], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(si29_offset(&[1], &[1.0, 2.0]), Err(NoiseError::LengthMismatch { .. })));

        // brute-force over all sign choices, independent of enumerate_offsets
        let mut vals = Vec::new();
        for a in [-1.0, 1.0] {
            for b in [-1.0, 1.0] {
                for c in [-1.0, 1.0] {
                    vals.push(a * 130.0 + b * 42.5 + c * 42.5);
                }
            }
        }
        let mut distinct: Vec<f64> = Vec::new();
        for v in vals {
            if !distinct.iter().any(|d| (d - v).abs() < 1e-9) {
                distinct.push(v);
            }
        }
        distinct.sort_by(f64::total_cmp);
        assert_eq!(distinct, vec![-215.0, -130.0, -45.0, 45.0, 130.0, 215.0]);
        let seps: Vec<f64> = distinct.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(seps.iter().all(|s| (85.0..=90.0).contains(s)));

        let mut from_bath = Si29Bath::measured(0.0).enumerate_offsets();
        from_bath.sort_by(f64::total_cmp);
        from_bath.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        assert_eq!(from_bath, distinct);
    }

    #[test]
    fn pirs_edsr_table_values() {
        let m = PirsModel::default();
        assert_relative_eq!(pirs_edsr_shift(1.84, 0.0, &m).unwrap(), 2.1, epsilon = 1e-12);
        assert_relative_eq!(pirs_edsr_shift(1.84, 1e9, &m).unwrap(), 96.9, epsilon = 1e-9);
        let at_tau = pirs_edsr_shift(1.84, 284.0, &m).unwrap();
        assert_relative_eq!(at_tau, 2.1 + 94.8 * (1.0 - (-1.0f64).exp()), epsilon = 1e-12);
        assert!(matches!(pirs_edsr_shift(1.4, 10.0, &m), Err(NoiseError::AmplitudeOutsideTable { .. })));
        let interp = PirsModel { interpolate: true, ..PirsModel::default() };
        let mid = pirs_edsr_shift(1.405, 0.0, &interp).unwrap();
        assert_relative_eq!(mid, 0.5 * (2.1 - 4.7), epsilon = 1e-9);
        assert!(pirs_edsr_shift(2.5, 0.0, &interp).is_err());
    }

    #[test]
    fn pirs_esr_linear() {
        let m = PirsModel::default();
        assert_relative_eq!(pirs_esr_shift(1.0, 0.0, &m), 50.5, epsilon = 1e-12);
        assert_relative_eq!(pirs_esr_shift(0.0, 100.0, &m), 21.9, epsilon = 1e-12);
        assert_eq!(pirs_esr_shift(0.0, 0.0, &m), 0.0);
    }

    #[test]
    fn combined_t1_values() {
        assert_relative_eq!(combined_t1(&RelaxationRates::measured()), 6.218176, epsilon = 1e-5);
        let only_e = RelaxationRates { t1e: 6.45, ..RelaxationRates::none() };
        assert_relative_eq!(combined_t1(&only_e), 6.45, epsilon = 1e-12);
        let eq = RelaxationRates { t1e: 10.0, t1ff: 10.0, t1n: f64::INFINITY };
        assert_relative_eq!(combined_t1(&eq), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn relaxation_zero_time_is_identity() {
        let s = QuantumState::basis(UP_NDOWN);
        let mut rng = stream(1, "t", 0);
        assert_eq!(apply_relaxation(&s, 0.0, &RelaxationRates::measured(), &mut rng), s);
    }

    /// RK4 integration of the population master equation as an independent oracle.
    fn rk4_populations(p0: [f64; 4], t: f64, rates: &RelaxationRates) -> [f64; 4] {
        let deriv = |p: &[f64; 4]| {
            let mut d = [0.0; 4];
            for (from, to, r) in rates.channels() {
                d[from] -= r * p[from];
                d[to] += r * p[from];
            }
            d
        };
        let n = 20_000;
        let h = t / n as f64;
        let mut p = p0;
        for _ in 0..n {
            let k1 = deriv(&p);
            let a: [f64; 4] = std::array::from_fn(|i| p[i] + 0.5 * h * k1[i]);
            let k2 = deriv(&a);
            let b: [f64; 4] = std::array::from_fn(|i| p[i] + 0.5 * h * k2[i]);
            let k3 = deriv(&b);
            let c: [f64; 4] = std::array::from_fn(|i| p[i] + h * k3[i]);
            let k4 = deriv(&c);
            for i in 0..4 {
                p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        p
    }

    #[test]
    fn closed_form_rate_equations_match_rk4() {
        let rates = RelaxationRates { t1e: 6.45, t1ff: 173.0, t1n: 900.0 };
        let p0 = [0.1, 0.5, 0.15, 0.25];
        let closed = rate_equation_populations(p0, 12.0, &rates);
        let oracle = rk4_populations(p0, 12.0, &rates);
        for k in 0..4 {
            assert_relative_eq!(closed[k], oracle[k], epsilon = 1e-10);
        }
        // degenerate rates hit the t·e^{-at} branch
        let rates = RelaxationRates { t1e: 10.0, t1ff: f64::INFINITY, t1n: 10.0 };
        let closed = rate_equation_populations(p0, 7.0, &rates);
        let oracle = rk4_populations(p0, 7.0, &rates);
        for k in 0..4 {
            assert_relative_eq!(closed[k], oracle[k], epsilon = 1e-10);
        }
    }

    #[test]
    fn trajectories_match_rate_equations() {
        let rates = RelaxationRates { t1e: 6.45, t1ff: 173.0, t1n: 400.0 };
        let n = 10_000;
        let t = 6.218;
        let mut counts = [0usize; 4];
        let mut rng = stream(7, "relax", 0);
        let start = QuantumState::basis(UP_NDOWN);
        for _ in 0..n {
            let s = apply_relaxation(&start, t, &rates, &mut rng);
            let p = s.populations();
            let k = (0..4).find(|k| p[*k] > 0.5).unwrap();
            counts[k] += 1;
        }
        let oracle = rk4_populations([0.0, 1.0, 0.0, 0.0], t, &rates);
        for k in 0..4 {
            let f = counts[k] as f64 / n as f64;
            let sigma = (oracle[k] * (1.0 - oracle[k]) / n as f64).sqrt().max(1e-4);
            assert!((f - oracle[k]).abs() < 3.0 * sigma + 1e-3, "level {k}: {f} vs {}", oracle[k]);
        }
        // survival at combined T1 is e^{-1} up to the small T1n leakage
        let surv = counts[UP_NDOWN] as f64 / n as f64;
        let expect = (-t / combined_t1(&rates)).exp();
        assert!((surv - expect).abs() < 3.0 * (expect * (1.0 - expect) / n as f64).sqrt());
    }

    #[test]
    fn superposition_jumps_preserve_norm() {
        let rates = RelaxationRates::measured();
        let mut v = Vec4::zeros();
        v[UP_NDOWN] = C64::from(0.6);
        v[DOWN_NDOWN] = C64::new(0.0, 0.8);
        let s = QuantumState::Pure(v);
        let mut rng = stream(3, "sup", 0);
        for _ in 0..200 {
            let out = apply_relaxation(&s, 3.0, &rates, &mut rng);
            assert!((out.trace() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_state_relaxation_is_trace_preserving() {
        let rates = RelaxationRates::measured();
        let s = QuantumState::basis(UP_NDOWN).into_mixed();
        let mut rng = stream(3, "mix", 0);
        let out = apply_relaxation(&s, 6.218176, &rates, &mut rng);
        assert_relative_eq!(out.trace(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.population(UP_NDOWN), (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn gaussian_realizations_have_requested_moments() {
        let env = NoiseEnvironment {
            dephasing: DephasingModel { quasi_static_sigma: 40.0, telegraph: vec![] },
            ..NoiseEnvironment::default()
        };
        let mut sampler = NoiseSampler::new(&env);
        let mut rng = stream(11, "moments", 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sampler.sample(0.0, &mut rng).electron_zeeman_offset()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s2 = 1600.0;
        assert!(mean.abs() < 3.0 * 40.0 / (n as f64).sqrt());
        // variance of the sample variance is 2σ⁴/(n−1)
        assert!((var - s2).abs() < 3.0 * s2 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn sigma_zero_no_bath_gives_zero_offsets() {
        let mut rng = stream(1, "z", 0);
        let r = sample_realization(&NoiseEnvironment::noiseless(), &mut rng);
        assert!(r.is_ideal());
    }

    #[test]
    fn frozen_bath_never_flips() {
        let env = NoiseEnvironment { si29: Some(Si29Bath::measured(0.0)), ..NoiseEnvironment::default() };
        let mut sampler = NoiseSampler::new(&env);
        let mut rng = stream(5, "bath", 0);
        let first = sampler.sample(0.0, &mut rng).si29_config().to_vec();
        for _ in 0..1000 {
            assert_eq!(sampler.sample(1e4, &mut rng).si29_config(), first.as_slice());
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut env = NoiseEnvironment::default();
        env.relaxation.t1e = -1.0;
        assert!(env.validate().is_err());
        let bath = Si29Bath { couplings: vec![1.0, 2.0], flip_rate: 1.0, current_config: Some(vec![1]) };
        assert!(matches!(bath.validate(), Err(NoiseError::LengthMismatch { .. })));
        let pirs = PirsModel {
            edsr_params: vec![EdsrShiftRow { amplitude: 1.0, delta_f_a: 1.0, tau_sat: 0.0, delta_f_0: 0.0 }],
            ..PirsModel::default()
        };
        assert!(pirs.validate().is_err());
    }

    #[test]
    fn infinite_lifetimes_survive_json() {
        let r = RelaxationRates::measured();
        let js = serde_json::to_string(&r).unwrap();
        assert!(js.contains("\"inf\""));
        let back: RelaxationRates = serde_json::from_str(&js).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn depolarizing_sets_average_fidelity() {
        let r = 0.0161;
        let plus = QuantumState::pure(Vec4::new(ZERO, C64::from(0.6), C64::new(0.0, 0.8), ZERO)).unwrap();
        for s in [QuantumState::basis(UP_NDOWN), QuantumState::basis(DOWN_NUP), plus] {
            let out = depolarize_flipflop(&s, r);
            let rho = out.density_matrix();
            let v = match &s {
                QuantumState::Pure(v) => *v,
                QuantumState::Mixed(_) => unreachable!(),
            };
            let f = (v.adjoint() * rho * v)[(0, 0)].re;
            assert!((f - (1.0 - r)).abs() < 1e-12);
            assert!((out.trace() - 1.0).abs() < 1e-12);
        }
        let outside = depolarize_flipflop(&QuantumState::basis(UP_NUP), r);
        assert!((outside.population(UP_NUP) - 1.0).abs() < 1e-12);
    }
}
