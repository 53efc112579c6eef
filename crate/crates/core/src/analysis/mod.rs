//! Damped least-squares fits of the decay and spectrum shapes, attenuation
//! calibration arithmetic and 1-D frequency clustering.

mod calibration;
mod cluster;
mod lm;
mod models;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibration::{
    db_to_ratio, edsr_attenuation, ratio_to_db, rabi_slope, set_attenuation, Attenuation, AmplitudeConvention,
};
pub use cluster::{cluster_frequencies, FrequencyCluster};
pub use lm::{levenberg_marquardt, LmOptions, LmSolution};
pub use models::{
    excess_width, fit_damped_sinusoid, fit_exponential, fit_gaussian_mixture, fit_stretched_exp, fwhm,
    gaussian_mixture_value, stretched_exp_value,
};
pub use report::{write_fit_report, write_residuals, FitReport};

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("no convergence after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("rank-deficient Jacobian at the optimum")]
    RankDeficient,
    #[error("{0} must be non-zero")]
    ZeroDenominator(&'static str),
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("cannot write report: {0}")]
    Io(String),
}

/// Samples `y(x)` with optional 1σ errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(default)]
    pub y_err: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, FitError> {
        let d = Self { x, y, y_err: None };
        d.validate()?;
        Ok(d)
    }

    pub fn with_errors(mut self, y_err: Vec<f64>) -> Result<Self, FitError> {
        self.y_err = Some(y_err);
        self.validate()?;
        Ok(self)
    }

    /// Samples `f` at `x`.
    pub fn from_fn(x: Vec<f64>, f: impl Fn(f64) -> f64) -> Self {
        let y = x.iter().map(|&t| f(t)).collect();
        Self { x, y, y_err: None }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.x.len() != self.y.len() {
            return Err(FitError::InvalidData(format!("x has {} entries, y has {}", self.x.len(), self.y.len())));
        }
        if let Some(e) = &self.y_err {
            if e.len() != self.y.len() {
                return Err(FitError::InvalidData(format!("y_err has {} entries, y has {}", e.len(), self.y.len())));
            }
            if e.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(FitError::InvalidData("y_err entries must be > 0".into()));
            }
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(FitError::InvalidData("non-finite sample".into()));
        }
        Ok(())
    }

    /// Additionally requires strictly increasing `x`.
    pub fn validate_increasing(&self) -> Result<(), FitError> {
        self.validate()?;
        if self.x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FitError::InvalidData("x must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    /// 1σ from the covariance at the optimum.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: String,
    pub params: Vec<FitParam>,
    pub covariance: Vec<Vec<f64>>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn sigma(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.sigma)
    }

    /// Value of a parameter known to exist.
    pub fn value(&self, name: &str) -> f64 {
        self.get(name).unwrap_or_else(|| panic!("fit `{}` has no parameter `{name}`", self.model))
    }
}
