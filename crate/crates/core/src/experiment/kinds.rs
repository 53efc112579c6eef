use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Diagnostics, ExperimentError, ExperimentKind, ExperimentSpec, RunOutput};
use crate::analysis::{
    cluster_frequencies, edsr_attenuation, fit_damped_sinusoid, fit_exponential, fit_stretched_exp, set_attenuation,
    Dataset, FitResult,
};
use crate::benchmark::{fit_rb, run_rb, write_rb_csv, RbConfig, RbSummary};
use crate::measurement::{endor_initialize, ComponentFidelities, ReadoutParams};
use crate::noise::{apply_relaxation, combined_t1, rate_equation_populations, sample_realization, NoiseEnvironment, NoiseSampler};
use crate::pulse::{
    build_standard_sequence, run_sequence_frozen, Channel, EvolutionConfig, Evolver, PulseSegment, PulseSequence,
    QuantumState, SequenceParams, Simulator, StandardKind, Transition,
};
use crate::rng::{stream, SimRng};
use crate::spin::{SpinSystem, DOWN_NDOWN, DOWN_NUP, UP_NDOWN, UP_NUP};
use crate::triangulate::{
    argmax_region, likelihood_map, map_summary, predicted_slope, solve_responses, write_map_csv, DeviceGeometry, Region,
    SlopeMeasurement, SolverOptions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSweep {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

/// Sweep axis: an explicit list or `{ start, stop, points }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sweep {
    Values(Vec<f64>),
    Linear(LinearSweep),
}

impl Sweep {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Sweep::Values(v) => v.clone(),
            Sweep::Linear(l) if l.points == 1 => vec![l.start],
            Sweep::Linear(l) => {
                let step = (l.stop - l.start) / (l.points - 1) as f64;
                (0..l.points).map(|i| l.start + step * i as f64).collect()
            }
        }
    }

    fn check(&self, path: &str, d: &mut Diagnostics, ascending: bool, non_negative: bool) {
        let v = self.values();
        if v.is_empty() {
            d.push(path, "sweep must contain at least one point");
            return;
        }
        if v.iter().any(|x| !x.is_finite()) {
            d.push(path, "sweep values must be finite");
        }
        if non_negative && v.iter().any(|x| *x < 0.0) {
            d.push(path, "sweep values must be >= 0");
        }
        if ascending && v.windows(2).any(|w| w[1] <= w[0]) {
            d.push(path, "sweep values must be strictly increasing");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    UpNup,
    UpNdown,
    DownNup,
    DownNdown,
}

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::UpNup => UP_NUP,
            Level::UpNdown => UP_NDOWN,
            Level::DownNup => DOWN_NUP,
            Level::DownNdown => DOWN_NDOWN,
        }
    }

    pub fn state(self) -> QuantumState {
        QuantumState::basis(self.index())
    }
}

fn level_down_nup() -> Level {
    Level::DownNup
}

fn level_up_ndown() -> Level {
    Level::UpNdown
}

fn level_down_ndown() -> Level {
    Level::DownNdown
}

fn esr() -> Channel {
    Channel::Esr
}

fn hundred() -> usize {
    100
}

fn zero() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumParams {
    /// Carrier frequencies, GHz.
    pub frequencies: Sweep,
    /// MHz for ESR/NMR, V for EDSR.
    pub amplitude: f64,
    /// µs.
    pub duration: f64,
    #[serde(default = "esr")]
    pub channel: Channel,
    #[serde(default = "level_down_ndown")]
    pub preparation: Level,
    #[serde(default = "hundred")]
    pub shots: usize,
    /// Noise realizations averaged per point; 1 for a static environment,
    /// 200 otherwise, when absent.
    #[serde(default)]
    pub realizations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RabiParams {
    /// Gate drive amplitude, V.
    pub amplitude: f64,
    /// Pulse lengths, µs, increasing.
    pub durations: Sweep,
    /// MHz from the flip-flop resonance.
    #[serde(default = "zero")]
    pub detuning: f64,
    #[serde(default = "level_down_nup")]
    pub preparation: Level,
    #[serde(default = "hundred")]
    pub shots: usize,
    #[serde(default)]
    pub realizations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChevronParams {
    /// Gate drive amplitude, V.
    pub amplitude: f64,
    /// MHz from the flip-flop resonance.
    pub detunings: Sweep,
    /// µs, increasing.
    pub durations: Sweep,
    #[serde(default = "level_down_nup")]
    pub preparation: Level,
    /// Readout shots per grid point; 0 writes populations only.
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub realizations: Option<usize>,
}

/// Ramsey and Hahn-echo parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherenceParams {
    /// Gate drive amplitude, V.
    pub amplitude: f64,
    /// Free evolution times, µs.
    pub taus: Sweep,
    #[serde(default = "zero")]
    pub detuning: f64,
    /// π-pulse length, µs; derived from the amplitude when absent.
    #[serde(default)]
    pub pi_duration: Option<f64>,
    #[serde(default = "level_down_nup")]
    pub preparation: Level,
    #[serde(default = "hundred")]
    pub shots: usize,
    #[serde(default)]
    pub realizations: Option<usize>,
}

fn thousand() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T1eParams {
    /// Waiting times, s.
    pub waits: Sweep,
    #[serde(default = "level_up_ndown")]
    pub preparation: Level,
    #[serde(default = "thousand")]
    pub trajectories: usize,
}

fn five() -> f64 {
    5.0
}

fn pump_fidelity() -> f64 {
    0.98
}

fn half() -> f64 {
    0.5
}

fn ten_thousand() -> usize {
    10_000
}

fn thirty() -> f64 {
    30.0
}

fn trace_step() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpParams {
    /// Time between inversions, s.
    #[serde(default = "five")]
    pub period: f64,
    /// Probability that one inversion swaps ↑⇓ and ↓⇓.
    #[serde(default = "pump_fidelity")]
    pub inversion_fidelity: f64,
    /// ↓⇓ population moved to ↑⇓ by the initial half passage.
    #[serde(default = "half")]
    pub half_fraction: f64,
    /// Times at which the nucleus is read, s.
    pub waits: Sweep,
    #[serde(default = "ten_thousand")]
    pub trajectories: usize,
    /// Length and resolution of the population trace, s.
    #[serde(default = "thirty")]
    pub trace_duration: f64,
    #[serde(default = "trace_step")]
    pub trace_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuclearStart {
    Up,
    Down,
    Mixed,
}

fn nuclear_down() -> NuclearStart {
    NuclearStart::Down
}

fn init_error() -> f64 {
    0.09
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndorParams {
    /// Probability that the electron starts ↑.
    #[serde(default = "init_error")]
    pub init_error: f64,
    #[serde(default = "nuclear_down")]
    pub start_nuclear: NuclearStart,
    #[serde(default = "ten_thousand")]
    pub trials: usize,
    #[serde(default)]
    pub components: ComponentFidelities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdsrInput {
    /// Flip-flop Rabi frequency per volt at the source.
    pub rabi_slope: f64,
    /// Stark slope of the hyperfine coupling per volt at the gate, same units.
    pub stark_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetInput {
    pub k_mw: f64,
    pub k_100hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttenuationParams {
    #[serde(default)]
    pub edsr: Option<EdsrInput>,
    #[serde(default)]
    pub set: Option<SetInput>,
}

fn mass() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriangulateParams {
    #[serde(default)]
    pub geometry: Option<DeviceGeometry>,
    /// TOML geometry file; inlined into `geometry` when the spec is loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_file: Option<PathBuf>,
    #[serde(default)]
    pub measurements: Vec<SlopeMeasurement>,
    /// Synthesizes measurements at this point (nm) for `pairs`.
    #[serde(default)]
    pub planted: Option<[f64; 3]>,
    /// `[swept, reference]` gate names.
    #[serde(default)]
    pub pairs: Vec<[String; 2]>,
    /// Relative Gaussian noise on synthesized slopes.
    #[serde(default)]
    pub slope_noise: f64,
    #[serde(default)]
    pub candidates: Option<Region>,
    #[serde(default)]
    pub prior: Option<Vec<Region>>,
    #[serde(default = "mass")]
    pub mass: f64,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn samples() -> usize {
    500
}

fn interval() -> f64 {
    10.0
}

fn peak_noise() -> f64 {
    2.0
}

fn min_separation() -> f64 {
    40.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Si29Params {
    #[serde(default = "samples")]
    pub samples: usize,
    /// Time between resonance scans, s.
    #[serde(default = "interval")]
    pub interval: f64,
    /// Peak-finding error of one scan, kHz.
    #[serde(default = "peak_noise")]
    pub peak_noise_khz: f64,
    #[serde(default = "min_separation")]
    pub min_separation_khz: f64,
}

impl Default for Si29Params {
    fn default() -> Self {
        Self { samples: samples(), interval: interval(), peak_noise_khz: peak_noise(), min_separation_khz: min_separation() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum KindParams {
    Spectrum(SpectrumParams),
    Rabi(RabiParams),
    Chevron(ChevronParams),
    Ramsey(CoherenceParams),
    Hahn(CoherenceParams),
    T1e(T1eParams),
    T1ffPump(PumpParams),
    EndorFidelity(EndorParams),
    Rb(RbConfig),
    CalibrateAttenuation(AttenuationParams),
    Triangulate(TriangulateParams),
    Si29Monitor(Si29Params),
}

fn typed<T: serde::de::DeserializeOwned>(table: toml::Table, d: &mut Diagnostics) -> Option<T> {
    match toml::Value::Table(table).try_into::<T>() {
        Ok(t) => Some(t),
        Err(e) => {
            let msg = e.to_string().trim().to_string();
            d.push(super::field_path("params", &msg), msg);
            None
        }
    }
}

fn positive(d: &mut Diagnostics, path: &str, v: f64) {
    d.check(v > 0.0 && v.is_finite(), path, || format!("must be > 0, got {v}"));
}

fn probability(d: &mut Diagnostics, path: &str, v: f64) {
    d.check((0.0..=1.0).contains(&v), path, || format!("must lie in [0, 1], got {v}"));
}

fn at_least_one(d: &mut Diagnostics, path: &str, v: usize) {
    d.check(v >= 1, path, || "must be >= 1".into());
}

impl KindParams {
    pub(crate) fn parse(kind: ExperimentKind, table: toml::Table, base: Option<&Path>, d: &mut Diagnostics) -> Option<Self> {
        Some(match kind {
            ExperimentKind::Spectrum => KindParams::Spectrum(typed(table, d)?),
            ExperimentKind::Rabi => KindParams::Rabi(typed(table, d)?),
            ExperimentKind::Chevron => KindParams::Chevron(typed(table, d)?),
            ExperimentKind::Ramsey => KindParams::Ramsey(typed(table, d)?),
            ExperimentKind::Hahn => KindParams::Hahn(typed(table, d)?),
            ExperimentKind::T1e => KindParams::T1e(typed(table, d)?),
            ExperimentKind::T1ffPump => KindParams::T1ffPump(typed(table, d)?),
            ExperimentKind::EndorFidelity => KindParams::EndorFidelity(typed(table, d)?),
            ExperimentKind::Rb => KindParams::Rb(typed(table, d)?),
            ExperimentKind::CalibrateAttenuation => KindParams::CalibrateAttenuation(typed(table, d)?),
            ExperimentKind::Triangulate => {
                let mut p: TriangulateParams = typed(table, d)?;
                if let Some(file) = p.geometry_file.take() {
                    let path = match base {
                        Some(b) if file.is_relative() => b.join(&file),
                        _ => file.clone(),
                    };
                    match DeviceGeometry::load(&path) {
                        Ok(g) if p.geometry.is_none() => p.geometry = Some(g),
                        Ok(_) => d.push("params.geometry_file", "give either `geometry` or `geometry_file`, not both"),
                        Err(e) => d.push("params.geometry_file", e.to_string()),
                    }
                }
                KindParams::Triangulate(p)
            }
            ExperimentKind::Si29Monitor => KindParams::Si29Monitor(typed(table, d)?),
        })
    }

    pub(crate) fn check(&self, env: &NoiseEnvironment, d: &mut Diagnostics) {
        match self {
            KindParams::Spectrum(p) => {
                p.frequencies.check("params.frequencies", d, false, false);
                if p.frequencies.values().iter().any(|f| *f <= 0.0) {
                    d.push("params.frequencies", "frequencies must be > 0");
                }
                positive(d, "params.duration", p.duration);
                d.check(p.amplitude >= 0.0, "params.amplitude", || "must be >= 0".into());
                check_realizations(d, p.realizations);
            }
            KindParams::Rabi(p) => {
                p.durations.check("params.durations", d, true, true);
                d.check(p.amplitude >= 0.0, "params.amplitude", || "must be >= 0".into());
                check_realizations(d, p.realizations);
            }
            KindParams::Chevron(p) => {
                p.detunings.check("params.detunings", d, false, false);
                p.durations.check("params.durations", d, true, true);
                d.check(p.amplitude >= 0.0, "params.amplitude", || "must be >= 0".into());
                check_realizations(d, p.realizations);
            }
            KindParams::Ramsey(p) | KindParams::Hahn(p) => {
                p.taus.check("params.taus", d, false, true);
                if p.taus.values().contains(&0.0) {
                    d.push("params.taus", "free evolution times must be > 0");
                }
                positive(d, "params.amplitude", p.amplitude);
                if let Some(t) = p.pi_duration {
                    positive(d, "params.pi_duration", t);
                }
                check_realizations(d, p.realizations);
            }
            KindParams::T1e(p) => {
                p.waits.check("params.waits", d, false, true);
                at_least_one(d, "params.trajectories", p.trajectories);
            }
            KindParams::T1ffPump(p) => {
                p.waits.check("params.waits", d, true, true);
                positive(d, "params.period", p.period);
                probability(d, "params.inversion_fidelity", p.inversion_fidelity);
                probability(d, "params.half_fraction", p.half_fraction);
                at_least_one(d, "params.trajectories", p.trajectories);
                positive(d, "params.trace_duration", p.trace_duration);
                positive(d, "params.trace_step", p.trace_step);
            }
            KindParams::EndorFidelity(p) => {
                probability(d, "params.init_error", p.init_error);
                at_least_one(d, "params.trials", p.trials);
                if let Err(e) = p.components.validate() {
                    d.push("params.components", e.to_string());
                }
            }
            KindParams::Rb(p) => {
                if let Err(e) = p.validate() {
                    d.push("params", e.to_string());
                }
            }
            KindParams::CalibrateAttenuation(p) => {
                if p.edsr.is_none() && p.set.is_none() {
                    d.push("params", "give at least one of `edsr` or `set`");
                }
                if let Some(e) = &p.edsr {
                    d.check(e.stark_slope != 0.0, "params.edsr.stark_slope", || "must be non-zero".into());
                }
                if let Some(s) = &p.set {
                    d.check(s.k_100hz != 0.0, "params.set.k_100hz", || "must be non-zero".into());
                }
            }
            KindParams::Triangulate(p) => match &p.geometry {
                None => d.push("params.geometry", "a device geometry (`geometry` or `geometry_file`) is required"),
                Some(g) => {
                    if let Err(e) = g.validate() {
                        d.push("params.geometry", e.to_string());
                    }
                    let n_pairs = if p.planted.is_some() { p.pairs.len() } else { p.measurements.len() };
                    d.check(n_pairs >= 2, "params", || {
                        "need at least 2 slope measurements, or `planted` with at least 2 `pairs`".into()
                    });
                    for (i, m) in p.measurements.iter().enumerate() {
                        for name in [&m.swept, &m.reference] {
                            if g.gate_index(name).is_err() {
                                d.push(format!("params.measurements[{i}]"), format!("unknown gate `{name}`"));
                            }
                        }
                    }
                    for (i, pair) in p.pairs.iter().enumerate() {
                        for name in pair {
                            if g.gate_index(name).is_err() {
                                d.push(format!("params.pairs[{i}]"), format!("unknown gate `{name}`"));
                            }
                        }
                    }
                    d.check(p.mass > 0.0 && p.mass <= 1.0, "params.mass", || format!("must lie in (0, 1], got {}", p.mass));
                    d.check(p.slope_noise >= 0.0, "params.slope_noise", || "must be >= 0".into());
                }
            },
            KindParams::Si29Monitor(p) => {
                d.check(env.si29.is_some(), "environment.si29", || "si29-monitor needs a 29Si bath".into());
                at_least_one(d, "params.samples", p.samples);
                d.check(p.interval >= 0.0, "params.interval", || "must be >= 0".into());
                d.check(p.peak_noise_khz >= 0.0, "params.peak_noise_khz", || "must be >= 0".into());
                positive(d, "params.min_separation_khz", p.min_separation_khz);
            }
        }
    }
}

fn check_realizations(d: &mut Diagnostics, r: Option<usize>) {
    if let Some(n) = r {
        at_least_one(d, "params.realizations", n);
    }
}

/// True when every shot sees the same Hamiltonian.
fn is_static(env: &NoiseEnvironment) -> bool {
    env.dephasing.quasi_static_sigma == 0.0 && env.dephasing.telegraph.is_empty() && env.si29.is_none()
}

fn realization_count(explicit: Option<usize>, env: &NoiseEnvironment) -> usize {
    explicit.unwrap_or(if is_static(env) { 1 } else { 200 })
}

/// Fraction of `shots` electron reads that blip, given the electron-up
/// population.
fn blip_fraction(p_up: f64, shots: usize, readout: &ReadoutParams, rng: &mut SimRng) -> f64 {
    if shots == 0 {
        return f64::NAN;
    }
    let p = (p_up * readout.p_blip_up() + (1.0 - p_up) * readout.p_blip_down()).clamp(0.0, 1.0);
    Binomial::new(shots as u64, p).expect("valid binomial").sample(rng) as f64 / shots as f64
}

fn electron_up(p: &[f64; 4]) -> f64 {
    p[UP_NUP] + p[UP_NDOWN]
}

fn ff_frequency(system: &SpinSystem) -> f64 {
    Transition::FlipFlop.frequency(&system.eigensystem())
}

fn ff_rabi(system: &SpinSystem, amplitude: f64) -> Result<f64, crate::pulse::PulseError> {
    let ev = Evolver::new(system, &crate::noise::NoiseRealization::ideal(), &EvolutionConfig::default())?;
    Ok(ev.coupling(Channel::Edsr, UP_NDOWN, DOWN_NUP).norm() * amplitude)
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, ExperimentError> {
    let io = |e: csv::Error| ExperimentError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| ExperimentError::Io(e.to_string()))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn fit_json(fit: Result<FitResult, crate::analysis::FitError>) -> serde_json::Value {
    match fit {
        Ok(f) => serde_json::to_value(f).unwrap_or(serde_json::Value::Null),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn accumulate(acc: &mut [f64; 4], p: [f64; 4], weight: f64) {
    for k in 0..4 {
        acc[k] += weight * p[k];
    }
}

pub(super) fn execute(spec: &ExperimentSpec) -> Result<RunOutput, ExperimentError> {
    let kind = spec.kind;
    let err = |e: String| ExperimentError::runtime(kind, e);
    match &spec.params {
        KindParams::Spectrum(p) => spectrum(spec, p).map_err(err),
        KindParams::Rabi(p) => rabi(spec, p).map_err(err),
        KindParams::Chevron(p) => chevron(spec, p).map_err(err),
        KindParams::Ramsey(p) => coherence(spec, p, StandardKind::Ramsey).map_err(err),
        KindParams::Hahn(p) => coherence(spec, p, StandardKind::HahnEcho).map_err(err),
        KindParams::T1e(p) => t1e(spec, p).map_err(err),
        KindParams::T1ffPump(p) => pump(spec, p).map_err(err),
        KindParams::EndorFidelity(p) => endor(spec, p).map_err(err),
        KindParams::Rb(p) => rb(spec, p).map_err(err),
        KindParams::CalibrateAttenuation(p) => attenuation(p).map_err(err),
        KindParams::Triangulate(p) => triangulate(spec, p).map_err(err),
        KindParams::Si29Monitor(p) => si29(spec, p).map_err(err),
    }
}

type Res<T> = Result<T, String>;

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn output(rows: Vec<u8>, summary: serde_json::Value) -> RunOutput {
    RunOutput { files: vec![("data.csv".into(), rows)], summary }
}

/// Runs `segments` from `state` under a frozen realization, without readout.
fn evolve(state: &QuantumState, segments: &[PulseSegment], sim: &Simulator, real: &crate::noise::NoiseRealization, rng: &mut SimRng) -> Res<[f64; 4]> {
    let seq = PulseSequence { label: String::new(), segments: segments.to_vec() };
    Ok(run_sequence_frozen(state, &seq, sim, real, rng).map_err(s)?.state.populations())
}

fn spectrum(spec: &ExperimentSpec, p: &SpectrumParams) -> Res<RunOutput> {
    let sim = spec.simulator();
    let freqs = p.frequencies.values();
    let n_real = realization_count(p.realizations, &sim.env);
    let points: Vec<([f64; 4], f64)> = freqs
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = stream(spec.seed, "spectrum", i as u64);
            let seg = [PulseSegment::tone(*f, p.amplitude, 0.0, p.duration, p.channel)];
            let mut acc = [0.0; 4];
            for _ in 0..n_real {
                let real = sample_realization(&sim.env, &mut rng);
                accumulate(&mut acc, evolve(&p.preparation.state(), &seg, &sim, &real, &mut rng)?, 1.0 / n_real as f64);
            }
            let frac = blip_fraction(electron_up(&acc), p.shots, &sim.readout, &mut rng);
            Ok((acc, frac))
        })
        .collect::<Res<_>>()?;
    let rows: Vec<Vec<String>> = freqs
        .iter()
        .zip(&points)
        .map(|(f, (pop, frac))| vec![f.to_string(), electron_up(pop).to_string(), fmt(*frac)])
        .collect();
    let peak = points
        .iter()
        .enumerate()
        .max_by(|a, b| electron_up(&a.1 .0).total_cmp(&electron_up(&b.1 .0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let summary = json!({
        "points": freqs.len(),
        "realizations": n_real,
        "peak_frequency_ghz": freqs[peak],
        "peak_electron_up": electron_up(&points[peak].0),
    });
    Ok(output(csv_bytes(&["frequency_ghz", "p_electron_up", "up_fraction"], &rows).map_err(s)?, summary))
}

/// Populations on the duration grid for every detuning, stepping one
/// evolver through the increasing durations.
fn chevron_grid(
    spec: &ExperimentSpec,
    amplitude: f64,
    detunings: &[f64],
    durations: &[f64],
    preparation: Level,
    n_real: usize,
    name: &str,
) -> Res<Vec<Vec<[f64; 4]>>> {
    let sim = spec.simulator();
    let f0 = ff_frequency(&sim.system);
    detunings
        .par_iter()
        .enumerate()
        .map(|(i, det)| {
            let mut rng = stream(spec.seed, name, i as u64);
            let f = (f0 + det) * 1e-3;
            let mut acc = vec![[0.0; 4]; durations.len()];
            for _ in 0..n_real {
                let real = sample_realization(&sim.env, &mut rng);
                let mut ev = Evolver::new(&sim.system, &real, &sim.evolution).map_err(s)?;
                let mut state = preparation.state();
                let mut t = 0.0;
                for (j, &d) in durations.iter().enumerate() {
                    if d > t {
                        let seg = PulseSegment::tone(f, amplitude, 0.0, d - t, Channel::Edsr);
                        state = ev.step(&state, &seg).map_err(s)?;
                        t = d;
                    }
                    accumulate(&mut acc[j], state.populations(), 1.0 / n_real as f64);
                }
            }
            Ok(acc)
        })
        .collect()
}

fn rabi(spec: &ExperimentSpec, p: &RabiParams) -> Res<RunOutput> {
    let durations = p.durations.values();
    let n_real = realization_count(p.realizations, &spec.environment);
    let grid = chevron_grid(spec, p.amplitude, &[p.detuning], &durations, p.preparation, n_real, "rabi")?;
    let mut rng = stream(spec.seed, "rabi-readout", 0);
    let mut rows = Vec::new();
    for (d, pop) in durations.iter().zip(&grid[0]) {
        let frac = blip_fraction(electron_up(pop), p.shots, &spec.readout, &mut rng);
        rows.push(vec![d.to_string(), pop[UP_NDOWN].to_string(), pop[DOWN_NUP].to_string(), fmt(frac)]);
    }
    let fit = Dataset::new(durations.clone(), grid[0].iter().map(|q| q[UP_NDOWN]).collect())
        .and_then(|data| fit_damped_sinusoid(&data));
    let summary = json!({
        "rabi_frequency_mhz": ff_rabi(&spec.system, p.amplitude).map_err(s)?,
        "realizations": n_real,
        "fit": fit_json(fit),
    });
    Ok(output(csv_bytes(&["duration_us", "p_up_ndown", "p_down_nup", "up_fraction"], &rows).map_err(s)?, summary))
}

fn chevron(spec: &ExperimentSpec, p: &ChevronParams) -> Res<RunOutput> {
    let detunings = p.detunings.values();
    let durations = p.durations.values();
    let n_real = realization_count(p.realizations, &spec.environment);
    let grid = chevron_grid(spec, p.amplitude, &detunings, &durations, p.preparation, n_real, "chevron")?;
    let mut rng = stream(spec.seed, "chevron-readout", 0);
    let mut rows = Vec::new();
    for (det, line) in detunings.iter().zip(&grid) {
        for (d, pop) in durations.iter().zip(line) {
            let mut row = vec![det.to_string(), d.to_string(), pop[UP_NDOWN].to_string()];
            if p.shots > 0 {
                row.push(fmt(blip_fraction(electron_up(pop), p.shots, &spec.readout, &mut rng)));
            }
            rows.push(row);
        }
    }
    let mut header = vec!["detuning_mhz", "duration_us", "p_up_ndown"];
    if p.shots > 0 {
        header.push("up_fraction");
    }
    let summary = json!({
        "rabi_frequency_mhz": ff_rabi(&spec.system, p.amplitude).map_err(s)?,
        "detunings": detunings.len(),
        "durations": durations.len(),
        "realizations": n_real,
    });
    Ok(output(csv_bytes(&header, &rows).map_err(s)?, summary))
}

fn coherence(spec: &ExperimentSpec, p: &CoherenceParams, kind: StandardKind) -> Res<RunOutput> {
    let sim = spec.simulator();
    let taus = p.taus.values();
    let n_real = realization_count(p.realizations, &sim.env);
    let name = if kind == StandardKind::Ramsey { "ramsey" } else { "hahn" };
    let points: Vec<([f64; 4], f64)> = taus
        .par_iter()
        .enumerate()
        .map(|(i, tau)| {
            let params = SequenceParams {
                amplitude: Some(p.amplitude),
                pi_duration: p.pi_duration,
                tau: Some(*tau),
                detuning: p.detuning,
                ..SequenceParams::default()
            };
            let mut seq = build_standard_sequence(kind, &params, &sim.system).map_err(s)?;
            seq.segments.retain(|x| !matches!(x, PulseSegment::ReadMarker));
            let mut rng = stream(spec.seed, name, i as u64);
            let mut acc = [0.0; 4];
            for _ in 0..n_real {
                let real = sample_realization(&sim.env, &mut rng);
                accumulate(&mut acc, evolve(&p.preparation.state(), &seq.segments, &sim, &real, &mut rng)?, 1.0 / n_real as f64);
            }
            let frac = blip_fraction(electron_up(&acc), p.shots, &sim.readout, &mut rng);
            Ok((acc, frac))
        })
        .collect::<Res<_>>()?;
    let rows: Vec<Vec<String>> = taus
        .iter()
        .zip(&points)
        .map(|(t, (pop, frac))| vec![t.to_string(), pop[UP_NDOWN].to_string(), pop[DOWN_NUP].to_string(), fmt(*frac)])
        .collect();
    let sigma = sim.env.dephasing.quasi_static_sigma;
    let t2_gaussian = if sigma > 0.0 { json!(1.0 / (2f64.sqrt() * PI * sigma * 1e-3)) } else { serde_json::Value::Null };
    let summary = if kind == StandardKind::Ramsey {
        let fit = Dataset::new(taus.clone(), points.iter().map(|q| q.0[UP_NDOWN]).collect()).and_then(|d| fit_stretched_exp(&d));
        json!({ "realizations": n_real, "fit": fit_json(fit), "t2_gaussian_us": t2_gaussian })
    } else {
        let echo: Vec<f64> = points.iter().map(|q| q.0[DOWN_NUP] - q.0[UP_NDOWN]).collect();
        let min_echo = echo.iter().cloned().fold(f64::INFINITY, f64::min);
        let fit = Dataset::new(taus.clone(), echo).and_then(|d| fit_stretched_exp(&d));
        json!({ "realizations": n_real, "min_echo_amplitude": min_echo, "fit": fit_json(fit) })
    };
    Ok(output(csv_bytes(&["tau_us", "p_up_ndown", "p_down_nup", "up_fraction"], &rows).map_err(s)?, summary))
}

fn level_of(state: &QuantumState) -> usize {
    let p = state.populations();
    (0..4).max_by(|a, b| p[*a].total_cmp(&p[*b])).unwrap_or(0)
}

fn t1e(spec: &ExperimentSpec, p: &T1eParams) -> Res<RunOutput> {
    let waits = p.waits.values();
    let rates = spec.environment.relaxation;
    let readout = spec.readout;
    let prep = p.preparation.index();
    let points: Vec<(f64, f64)> = waits
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = stream(spec.seed, "t1e", i as u64);
            let (mut survived, mut blips) = (0usize, 0usize);
            for _ in 0..p.trajectories {
                let end = level_of(&apply_relaxation(&QuantumState::basis(prep), *w, &rates, &mut rng));
                survived += (end == prep) as usize;
                let up = end == UP_NUP || end == UP_NDOWN;
                let pb = if up { readout.p_blip_up() } else { readout.p_blip_down() };
                blips += (rng.random::<f64>() < pb) as usize;
            }
            let n = p.trajectories as f64;
            (survived as f64 / n, blips as f64 / n)
        })
        .collect();
    let rows: Vec<Vec<String>> =
        waits.iter().zip(&points).map(|(w, (sv, bl))| vec![w.to_string(), sv.to_string(), bl.to_string()]).collect();
    let fit = Dataset::new(waits.clone(), points.iter().map(|q| q.1).collect()).and_then(|d| fit_exponential(&d));
    let summary = json!({
        "trajectories": p.trajectories,
        "fit": fit_json(fit),
        "combined_t1_s": combined_t1(&rates),
    });
    Ok(output(csv_bytes(&["wait_s", "survival", "up_fraction"], &rows).map_err(s)?, summary))
}

fn swap_with(p: &mut [f64; 4], a: usize, b: usize, f: f64) {
    let (pa, pb) = (p[a], p[b]);
    p[a] = f * pb + (1.0 - f) * pa;
    p[b] = f * pa + (1.0 - f) * pb;
}

fn pump(spec: &ExperimentSpec, p: &PumpParams) -> Res<RunOutput> {
    let rates = spec.environment.relaxation;
    // population trace
    let mut pop = [0.0; 4];
    pop[DOWN_NDOWN] = 1.0 - p.half_fraction;
    pop[UP_NDOWN] = p.half_fraction;
    let steps_per_period = (p.period / p.trace_step).round().max(1.0) as usize;
    let dt = p.period / steps_per_period as f64;
    let periods = (p.trace_duration / p.period).ceil() as usize;
    let mut trace = Vec::new();
    let mut uniform = Vec::new();
    for k in 0..periods {
        for j in 0..steps_per_period {
            let t = (k * steps_per_period + j) as f64 * dt;
            if t > p.trace_duration + 1e-12 {
                break;
            }
            trace.push((t, pop));
            uniform.push(pop);
            pop = rate_equation_populations(pop, dt, &rates);
        }
        let t = ((k + 1) * steps_per_period) as f64 * dt;
        if t <= p.trace_duration + 1e-12 {
            trace.push((t, pop));
            swap_with(&mut pop, UP_NDOWN, DOWN_NDOWN, p.inversion_fidelity);
        }
    }
    let updown: Vec<f64> = trace.iter().map(|r| r.1[UP_NDOWN]).collect();
    let trace_min = updown.iter().cloned().fold(f64::INFINITY, f64::min);
    let trace_max = updown.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let trace_mean = uniform.iter().map(|q| q[UP_NDOWN]).sum::<f64>() / uniform.len() as f64;
    let occupancy =
        uniform.iter().map(|q| q[UP_NDOWN] / (q[UP_NDOWN] + q[DOWN_NDOWN]).max(1e-300)).sum::<f64>() / uniform.len() as f64;

    // nuclear decay from jump trajectories
    let waits = p.waits.values();
    let horizon = waits.last().copied().unwrap_or(0.0);
    let n_inv = (horizon / p.period).floor() as usize;
    let counts: Vec<usize> = (0..p.trajectories)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(spec.seed, "t1ff-pump", j as u64);
            let mut level = if rng.random::<f64>() < p.half_fraction { UP_NDOWN } else { DOWN_NDOWN };
            let mut t = 0.0;
            let mut down = vec![0usize; waits.len()];
            let mut wi = 0;
            let advance = |to: f64, level: &mut usize, t: &mut f64, rng: &mut SimRng| {
                if to > *t {
                    *level = level_of(&apply_relaxation(&QuantumState::basis(*level), to - *t, &rates, rng));
                    *t = to;
                }
            };
            for k in 1..=n_inv + 1 {
                let t_inv = k as f64 * p.period;
                while wi < waits.len() && waits[wi] <= t_inv {
                    advance(waits[wi], &mut level, &mut t, &mut rng);
                    down[wi] = (level == UP_NDOWN || level == DOWN_NDOWN) as usize;
                    wi += 1;
                }
                if wi == waits.len() {
                    break;
                }
                advance(t_inv, &mut level, &mut t, &mut rng);
                if (level == UP_NDOWN || level == DOWN_NDOWN) && rng.random::<f64>() < p.inversion_fidelity {
                    level = if level == UP_NDOWN { DOWN_NDOWN } else { UP_NDOWN };
                }
            }
            down
        })
        .reduce(|| vec![0usize; waits.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let n = p.trajectories as f64;
    let frac: Vec<f64> = counts.iter().map(|c| *c as f64 / n).collect();
    let rows: Vec<Vec<String>> = waits.iter().zip(&frac).map(|(w, f)| vec![w.to_string(), f.to_string()]).collect();
    let fit = Dataset::new(waits.clone(), frac.clone()).and_then(|d| fit_exponential(&d));
    let tau = fit.as_ref().ok().map(|f| f.value("tau"));
    let trace_rows: Vec<Vec<String>> = trace
        .iter()
        .map(|(t, q)| std::iter::once(t.to_string()).chain(q.iter().map(|x| x.to_string())).collect())
        .collect();
    let summary = json!({
        "trace_min": trace_min,
        "trace_max": trace_max,
        "trace_mean": trace_mean,
        "occupancy": occupancy,
        "nuclear_decay_s": tau,
        "t1ff_estimate_s": tau.map(|t| t * occupancy),
        "trajectories": p.trajectories,
        "fit": fit_json(fit),
    });
    let mut out = output(csv_bytes(&["wait_s", "nuclear_down_fraction"], &rows).map_err(s)?, summary);
    out.files.push((
        "trace.csv".into(),
        csv_bytes(&["time_s", "p_up_nup", "p_up_ndown", "p_down_nup", "p_down_ndown"], &trace_rows).map_err(s)?,
    ));
    Ok(out)
}

fn endor(spec: &ExperimentSpec, p: &EndorParams) -> Res<RunOutput> {
    let readout = spec.readout;
    let hits: f64 = (0..p.trials)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(spec.seed, "endor", j as u64);
            let nuclear_up = match p.start_nuclear {
                NuclearStart::Up => true,
                NuclearStart::Down => false,
                NuclearStart::Mixed => rng.random::<bool>(),
            };
            let electron_up = rng.random::<f64>() < p.init_error;
            let level = match (electron_up, nuclear_up) {
                (true, true) => UP_NUP,
                (true, false) => UP_NDOWN,
                (false, true) => DOWN_NUP,
                (false, false) => DOWN_NDOWN,
            };
            endor_initialize(&QuantumState::basis(level), &p.components, &readout, &mut rng).population(DOWN_NUP)
        })
        .sum();
    let n = p.trials as f64;
    let f = hits / n;
    let se = (f * (1.0 - f) / n).sqrt();
    let rows = vec![vec![p.trials.to_string(), f.to_string(), se.to_string()]];
    let summary = json!({ "trials": p.trials, "fidelity": f, "stderr": se });
    Ok(output(csv_bytes(&["trials", "fidelity", "stderr"], &rows).map_err(s)?, summary))
}

fn rb(spec: &ExperimentSpec, p: &RbConfig) -> Res<RunOutput> {
    let sim = spec.simulator();
    let samples = run_rb(p, &sim, spec.seed).map_err(s)?;
    let result = fit_rb(&samples).map_err(s)?;
    let mut data = Vec::new();
    write_rb_csv(&result, &mut data).map_err(s)?;
    let seq_rows: Vec<Vec<String>> = samples
        .iter()
        .map(|x| vec![x.length.to_string(), x.sequence.to_string(), x.survival.to_string(), x.discarded.to_string()])
        .collect();
    let mut out = output(data, serde_json::to_value(RbSummary::from(&result)).map_err(s)?);
    out.files.push(("sequences.csv".into(), csv_bytes(&["m", "sequence", "survival", "discarded"], &seq_rows).map_err(s)?));
    Ok(out)
}

fn attenuation(p: &AttenuationParams) -> Res<RunOutput> {
    let mut rows = Vec::new();
    let mut summary = serde_json::Map::new();
    if let Some(e) = &p.edsr {
        let a = edsr_attenuation(e.rabi_slope, e.stark_slope).map_err(s)?;
        rows.push(vec!["edsr".to_string(), a.ratio.to_string(), a.db.to_string()]);
        summary.insert("edsr".into(), serde_json::to_value(a).map_err(s)?);
    }
    if let Some(x) = &p.set {
        let a = set_attenuation(x.k_mw, x.k_100hz).map_err(s)?;
        rows.push(vec!["set".to_string(), a.ratio.to_string(), a.db.to_string()]);
        summary.insert("set".into(), serde_json::to_value(a).map_err(s)?);
    }
    Ok(output(csv_bytes(&["method", "ratio", "db"], &rows).map_err(s)?, serde_json::Value::Object(summary)))
}

fn triangulate(spec: &ExperimentSpec, p: &TriangulateParams) -> Res<RunOutput> {
    let geometry = p.geometry.as_ref().ok_or("no geometry")?;
    let responses = solve_responses(geometry, &p.solver).map_err(s)?;
    let measurements = match p.planted {
        Some(r) => {
            let mut rng = stream(spec.seed, "triangulate", 0);
            let noise = Normal::new(0.0, 1.0).expect("unit normal");
            p.pairs
                .iter()
                .map(|[a, b]| {
                    let s0 = predicted_slope(&responses, a, b, r).map_err(s)?;
                    let slope = s0 * (1.0 + p.slope_noise * noise.sample(&mut rng));
                    Ok(SlopeMeasurement { swept: a.clone(), reference: b.clone(), slope })
                })
                .collect::<Res<Vec<_>>>()?
        }
        None => p.measurements.clone(),
    };
    let map = likelihood_map(&measurements, &responses, p.candidates, p.prior.as_deref()).map_err(s)?;
    let region = argmax_region(&map, p.mass);
    let mut data = Vec::new();
    write_map_csv(&map, &mut data).map_err(s)?;
    let ms = map_summary(&map, &region, p.mass);
    let mut summary = serde_json::to_value(&ms).map_err(s)?;
    summary["measurements"] = serde_json::to_value(&measurements).map_err(s)?;
    if let Some(r) = p.planted {
        let cells = (0..3).map(|a| (ms.argmax[a] - r[a]).abs() / geometry.spacing).fold(0.0, f64::max);
        let covered = map.grid.nearest(r).is_some_and(|i| region.cells.contains(&i));
        summary["planted"] = json!(r);
        summary["argmax_error_cells"] = json!(cells);
        summary["planted_in_region"] = json!(covered);
    }
    summary["solver_iterations"] = json!(responses.iter().map(|r| r.iterations).collect::<Vec<_>>());
    Ok(output(data, summary))
}

fn si29(spec: &ExperimentSpec, p: &Si29Params) -> Res<RunOutput> {
    let env = &spec.environment;
    let bath = env.si29.as_ref().ok_or("environment.si29 is required")?;
    let mut sampler = NoiseSampler::new(env);
    let mut rng = stream(spec.seed, "si29", 0);
    let peak = Normal::new(0.0, p.peak_noise_khz.max(1e-300)).expect("sigma > 0");
    let mut rows = Vec::new();
    let mut measured = Vec::new();
    for i in 0..p.samples {
        let real = sampler.sample(if i == 0 { 0.0 } else { p.interval }, &mut rng);
        let truth = real.si29_offset();
        let m = if p.peak_noise_khz > 0.0 { truth + peak.sample(&mut rng) } else { truth };
        measured.push(m);
        rows.push(vec![(i as f64 * p.interval).to_string(), m.to_string(), truth.to_string()]);
    }
    let clusters = cluster_frequencies(&measured, p.min_separation_khz);
    let mut expected = bath.enumerate_offsets();
    expected.sort_by(f64::total_cmp);
    expected.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let cluster_rows: Vec<Vec<String>> = clusters
        .iter()
        .map(|c| vec![c.center.to_string(), c.width.to_string(), c.count.to_string()])
        .collect();
    let summary = json!({
        "clusters": clusters,
        "enumerated_offsets_khz": expected,
    });
    let mut out = output(csv_bytes(&["time_s", "offset_khz", "true_offset_khz"], &rows).map_err(s)?, summary);
    out.files.push(("clusters.csv".into(), csv_bytes(&["center_khz", "width_khz", "count"], &cluster_rows).map_err(s)?));
    Ok(out)
}
