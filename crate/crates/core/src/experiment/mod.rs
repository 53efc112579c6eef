//! Declarative experiments: a TOML document names a kind, a seed, the
//! simulator settings and kind-specific parameters; running it produces a
//! CSV data file, optional extra files and a `metadata.json` that embeds the
//! fully resolved configuration.

mod kinds;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurement::ReadoutParams;
use crate::noise::NoiseEnvironment;
use crate::pulse::{EvolutionConfig, Simulator};
use crate::spin::SpinSystem;

pub use kinds::{
    AttenuationParams, ChevronParams, CoherenceParams, EdsrInput, EndorParams, KindParams, Level, NuclearStart,
    PumpParams, RabiParams, SetInput, Si29Params, SpectrumParams, Sweep, T1eParams, TriangulateParams,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Spectrum,
    Rabi,
    Chevron,
    Ramsey,
    Hahn,
    T1e,
    T1ffPump,
    EndorFidelity,
    Rb,
    CalibrateAttenuation,
    Triangulate,
    Si29Monitor,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 12] = [
        ExperimentKind::Spectrum,
        ExperimentKind::Rabi,
        ExperimentKind::Chevron,
        ExperimentKind::Ramsey,
        ExperimentKind::Hahn,
        ExperimentKind::T1e,
        ExperimentKind::T1ffPump,
        ExperimentKind::EndorFidelity,
        ExperimentKind::Rb,
        ExperimentKind::CalibrateAttenuation,
        ExperimentKind::Triangulate,
        ExperimentKind::Si29Monitor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Spectrum => "spectrum",
            ExperimentKind::Rabi => "rabi",
            ExperimentKind::Chevron => "chevron",
            ExperimentKind::Ramsey => "ramsey",
            ExperimentKind::Hahn => "hahn",
            ExperimentKind::T1e => "t1e",
            ExperimentKind::T1ffPump => "t1ff-pump",
            ExperimentKind::EndorFidelity => "endor-fidelity",
            ExperimentKind::Rb => "rb",
            ExperimentKind::CalibrateAttenuation => "calibrate-attenuation",
            ExperimentKind::Triangulate => "triangulate",
            ExperimentKind::Si29Monitor => "si29-monitor",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::Spectrum => "single-tone frequency scan with electron readout",
            ExperimentKind::Rabi => "flip-flop Rabi oscillation versus pulse length",
            ExperimentKind::Chevron => "flip-flop Rabi chevron over detuning and pulse length",
            ExperimentKind::Ramsey => "flip-flop free induction decay",
            ExperimentKind::Hahn => "flip-flop Hahn echo",
            ExperimentKind::T1e => "relaxation of a prepared level, fitted decay time",
            ExperimentKind::T1ffPump => "electron pumping trace and nuclear flip-flop decay",
            ExperimentKind::EndorFidelity => "ENDOR initialisation success rate",
            ExperimentKind::Rb => "single-qubit Clifford randomized benchmarking",
            ExperimentKind::CalibrateAttenuation => "line attenuation from Rabi/Stark slopes and Coulomb-peak broadening",
            ExperimentKind::Triangulate => "donor position likelihood from transition slopes",
            ExperimentKind::Si29Monitor => "resonance tracking of the 29Si bath and frequency clustering",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn allowed() -> String {
        Self::ALL.map(|k| k.name()).join(", ")
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One schema problem, located by a dotted path into the document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Default)]
pub(crate) struct Diagnostics(pub Vec<Diagnostic>);

impl Diagnostics {
    pub fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(Diagnostic { path: path.into(), message: message.into() });
    }

    pub fn check(&mut self, ok: bool, path: &str, message: impl FnOnce() -> String) {
        if !ok {
            self.push(path, message());
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec:\n{}", .0.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<Diagnostic>),
    #[error("{kind} failed: {message}")]
    Runtime { kind: ExperimentKind, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl ExperimentError {
    pub(crate) fn runtime(kind: ExperimentKind, e: impl fmt::Display) -> Self {
        ExperimentError::Runtime { kind, message: e.to_string() }
    }
}

/// A validated experiment document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub system: SpinSystem,
    pub environment: NoiseEnvironment,
    pub readout: ReadoutParams,
    pub evolution: EvolutionConfig,
    pub params: KindParams,
}

const TOP_LEVEL_KEYS: [&str; 8] = ["kind", "seed", "description", "system", "environment", "readout", "evolution", "params"];

/// Narrows `prefix` to the offending field named in a serde message.
pub(crate) fn field_path(prefix: &str, message: &str) -> String {
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = message.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return format!("{prefix}.{name}");
            }
        }
    }
    prefix.to_string()
}

fn section<T: serde::de::DeserializeOwned + Default>(root: &toml::Table, key: &str, diags: &mut Diagnostics) -> T {
    match root.get(key) {
        None => T::default(),
        Some(v) => match v.clone().try_into::<T>() {
            Ok(t) => t,
            Err(e) => {
                let msg = e.to_string().trim().to_string();
                diags.push(field_path(key, &msg), msg);
                T::default()
            }
        },
    }
}

impl ExperimentSpec {
    /// Parses a TOML document, reporting every schema problem found.
    pub fn from_toml_str(text: &str) -> Result<Self, Vec<Diagnostic>> {
        let root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| vec![Diagnostic { path: String::new(), message: e.to_string().trim().to_string() }])?;
        Self::from_table(&root, None)
    }

    /// Accepts a spec as JSON, or a `metadata.json` whose `config` member is
    /// the spec.
    pub fn from_json_str(text: &str) -> Result<Self, Vec<Diagnostic>> {
        Self::from_table(&json_table(text)?, None)
    }

    /// Loads `.toml` or `.json`; relative `geometry_file` paths resolve
    /// against the document's directory.
    pub fn load(path: &Path) -> Result<Self, Vec<Diagnostic>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| vec![Diagnostic { path: String::new(), message: format!("{}: {e}", path.display()) }])?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let root: toml::Table = if is_json {
            json_table(&text)?
        } else {
            text.parse()
                .map_err(|e: toml::de::Error| vec![Diagnostic { path: String::new(), message: e.to_string().trim().to_string() }])?
        };
        Self::from_table(&root, path.parent())
    }

    fn from_table(root: &toml::Table, base: Option<&Path>) -> Result<Self, Vec<Diagnostic>> {
        let mut d = Diagnostics::default();
        for key in root.keys() {
            if !TOP_LEVEL_KEYS.contains(&key.as_str()) {
                d.push(key.as_str(), format!("unknown key; expected one of {}", TOP_LEVEL_KEYS.join(", ")));
            }
        }
        let seed = match root.get("seed") {
            None => {
                d.push("seed", "missing required field `seed`");
                None
            }
            Some(toml::Value::Integer(s)) if *s >= 0 => Some(*s as u64),
            Some(v) => {
                d.push("seed", format!("expected a non-negative integer, got {v}"));
                None
            }
        };
        let kind = match root.get("kind") {
            None => {
                d.push("kind", format!("missing required field `kind`; allowed kinds: {}", ExperimentKind::allowed()));
                None
            }
            Some(toml::Value::String(s)) => {
                let k = ExperimentKind::from_name(s);
                if k.is_none() {
                    d.push("kind", format!("unknown kind `{s}`; allowed kinds: {}", ExperimentKind::allowed()));
                }
                k
            }
            Some(v) => {
                d.push("kind", format!("expected a string, got {v}; allowed kinds: {}", ExperimentKind::allowed()));
                None
            }
        };
        let description = match root.get("description") {
            None => None,
            Some(toml::Value::String(s)) => Some(s.clone()),
            Some(_) => {
                d.push("description", "expected a string");
                None
            }
        };
        let system: SpinSystem = section(root, "system", &mut d);
        let environment: NoiseEnvironment = section(root, "environment", &mut d);
        let readout: ReadoutParams = section(root, "readout", &mut d);
        let evolution: EvolutionConfig = section(root, "evolution", &mut d);
        if root.contains_key("system") {
            if let Err(e) = system.validate() {
                d.push("system", e.to_string());
            }
        }
        if root.contains_key("environment") {
            if let Err(e) = environment.validate() {
                d.push("environment", e.to_string());
            }
        }
        if root.contains_key("readout") {
            if let Err(e) = readout.validate() {
                d.push("readout", e.to_string());
            }
        }
        if root.contains_key("evolution") {
            if let Err(e) = evolution.validate() {
                d.push("evolution", e.to_string());
            }
        }
        let params = kind.and_then(|k| {
            let table = match root.get("params") {
                None => toml::Table::new(),
                Some(toml::Value::Table(t)) => t.clone(),
                Some(_) => {
                    d.push("params", "expected a table");
                    return None;
                }
            };
            KindParams::parse(k, table, base, &mut d)
        });
        if let Some(p) = &params {
            p.check(&environment, &mut d);
        }
        match (d.0.is_empty(), kind, seed, params) {
            (true, Some(kind), Some(seed), Some(params)) => {
                Ok(Self { kind, seed, description, system, environment, readout, evolution, params })
            }
            _ => Err(d.0),
        }
    }

    pub fn simulator(&self) -> Simulator {
        Simulator::new(self.system, self.environment.clone(), self.readout, self.evolution)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("spec serializes")
    }
}

/// Diagnostics for a document on disk; empty when it is valid.
pub fn validate_file(path: &Path) -> Vec<Diagnostic> {
    match ExperimentSpec::load(path) {
        Ok(_) => Vec::new(),
        Err(d) => d,
    }
}

/// Diagnostics for a TOML document; empty when it is valid.
pub fn validate_str(text: &str) -> Vec<Diagnostic> {
    match ExperimentSpec::from_toml_str(text) {
        Ok(_) => Vec::new(),
        Err(d) => d,
    }
}

fn strip_nulls(v: serde_json::Value) -> Option<serde_json::Value> {
    use serde_json::Value;
    match v {
        Value::Null => None,
        Value::Array(a) => Some(Value::Array(a.into_iter().filter_map(strip_nulls).collect())),
        Value::Object(o) => Some(Value::Object(o.into_iter().filter_map(|(k, v)| strip_nulls(v).map(|v| (k, v))).collect())),
        v => Some(v),
    }
}

/// Spec table from JSON, unwrapping the `config` member of a metadata file.
fn json_table(text: &str) -> Result<toml::Table, Vec<Diagnostic>> {
    let diag = |m: String| vec![Diagnostic { path: String::new(), message: m }];
    let mut json: serde_json::Value = serde_json::from_str(text).map_err(|e| diag(e.to_string()))?;
    if let Some(cfg) = json.get("config").filter(|_| json.get("software").is_some()) {
        json = cfg.clone();
    }
    let json = strip_nulls(json).unwrap_or_default();
    toml::Table::try_from(json).map_err(|e| diag(e.to_string()))
}

/// In-memory result of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// `(file name, contents)`; the first entry is `data.csv`.
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub software: &'static str,
    pub version: &'static str,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
    pub environment: NoiseEnvironment,
    pub config: serde_json::Value,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn metadata(&self, spec: &ExperimentSpec) -> Metadata {
        let mut outputs: Vec<String> = self.files.iter().map(|(n, _)| n.clone()).collect();
        outputs.push("metadata.json".into());
        Metadata {
            software: "flipflop",
            version: VERSION,
            kind: spec.kind,
            seed: spec.seed,
            outputs,
            summary: self.summary.clone(),
            environment: spec.environment.clone(),
            config: spec.to_json(),
        }
    }
}

/// Runs `spec` without touching the filesystem.
pub fn execute(spec: &ExperimentSpec) -> Result<RunOutput, ExperimentError> {
    kinds::execute(spec)
}

/// Runs `spec` and writes its files plus `metadata.json` under `out_dir`.
pub fn run(spec: &ExperimentSpec, out_dir: &Path) -> Result<(RunOutput, Vec<PathBuf>), ExperimentError> {
    let out = execute(spec)?;
    let io = |e: std::io::Error| ExperimentError::Io(format!("{}: {e}", out_dir.display()));
    std::fs::create_dir_all(out_dir).map_err(io)?;
    let mut written = Vec::new();
    for (name, bytes) in &out.files {
        let p = out_dir.join(name);
        std::fs::write(&p, bytes).map_err(io)?;
        written.push(p);
    }
    let meta = serde_json::to_vec_pretty(&out.metadata(spec)).map_err(|e| ExperimentError::Io(e.to_string()))?;
    let p = out_dir.join("metadata.json");
    std::fs::write(&p, meta).map_err(io)?;
    written.push(p);
    Ok((out, written))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_seed_is_one_error() {
        let d = validate_str("kind = \"t1e\"\n[params]\nwaits = [1.0, 2.0]\n");
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].path, "seed");
        assert!(d[0].message.contains("seed"));
    }

    #[test]
    fn unknown_kind_lists_allowed() {
        let d = validate_str("kind = \"tomography\"\nseed = 1\n");
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].path, "kind");
        for k in ExperimentKind::ALL {
            assert!(d[0].message.contains(k.name()));
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_paths() {
        let d = validate_str("kind = \"t1e\"\nseed = 1\ncolour = 3\n[params]\nwaits = [1.0]\nbogus = 2\n[readout]\nfoo = 1\n");
        let paths: Vec<&str> = d.iter().map(|x| x.path.as_str()).collect();
        assert!(paths.contains(&"colour"), "{d:?}");
        assert!(paths.contains(&"params.bogus"), "{d:?}");
        assert!(paths.contains(&"readout.foo"), "{d:?}");
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(ExperimentKind::from_name(k.name()), Some(k));
            let json = serde_json::to_value(k).unwrap();
            assert_eq!(json.as_str(), Some(k.name()));
        }
    }
}
