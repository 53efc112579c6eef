use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::{Dataset, FitError, FitResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub value: f64,
    pub sigma: f64,
}

/// JSON summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub model: String,
    pub params: BTreeMap<String, ParamReport>,
    pub residual_norm: f64,
    pub converged: bool,
}

impl From<&FitResult> for FitReport {
    fn from(r: &FitResult) -> Self {
        Self {
            model: r.model.clone(),
            params: r.params.iter().map(|p| (p.name.clone(), ParamReport { value: p.value, sigma: p.sigma })).collect(),
            residual_norm: r.residual_norm,
            converged: r.converged,
        }
    }
}

pub fn write_fit_report<W: Write>(result: &FitResult, writer: W) -> Result<(), FitError> {
    serde_json::to_writer_pretty(writer, &FitReport::from(result)).map_err(|e| FitError::Io(e.to_string()))
}

/// Writes `x,y,fit,residual` rows for a fitted model.
pub fn write_residuals<W: Write>(data: &Dataset, model: impl Fn(f64) -> f64, writer: W) -> Result<(), FitError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| FitError::Io(e.to_string());
    w.write_record(["x", "y", "fit", "residual"]).map_err(io)?;
    for (x, y) in data.x.iter().zip(&data.y) {
        let f = model(*x);
        w.write_record([x.to_string(), y.to_string(), f.to_string(), (y - f).to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| FitError::Io(e.to_string()))
}
