//! Donor triangulation from transition slopes: finite-difference
//! electrostatics over a gate layout and the slope-likelihood map.
//!
//! The domain is the box `[0, extent]` (nm) on a regular grid. Gates and
//! grounded layers are prisms: a polygon footprint in x–y extruded between
//! two heights. The bottom and top faces of the box are grounded, the lateral
//! faces are zero-flux, and the dielectric is uniform.

mod likelihood;
mod solver;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use likelihood::{
    argmax_region, likelihood_map, map_summary, predicted_slope, slope_sigma, write_map_csv, write_summary_json, CredibleRegion,
    LikelihoodMap, MapSummary, Region, SlopeMeasurement,
};
pub use solver::{solve_potential, solve_responses, PotentialResponse, SolverOptions};

#[derive(Debug, Error, PartialEq)]
pub enum TriangulateError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("cannot parse geometry: {0}")]
    Parse(String),
    #[error("solver did not converge after {iterations} sweeps (relative residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("unknown gate `{0}`")]
    UnknownGate(String),
    #[error("gate `{gate}` has no lever arm at ({x:.2}, {y:.2}, {z:.2}) nm")]
    Screened { gate: String, x: f64, y: f64, z: f64 },
    #[error("point ({0:.2}, {1:.2}, {2:.2}) nm is outside the domain")]
    OutsideDomain(f64, f64, f64),
    #[error("need at least {need} gate pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("no candidate cells with non-zero weight")]
    EmptyMap,
    #[error("cannot write output: {0}")]
    Io(String),
}

/// Prism conductor: polygon footprint (nm) between two heights (nm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conductor {
    pub name: String,
    pub footprint: Vec<[f64; 2]>,
    pub z_bottom: f64,
    pub z_top: f64,
}

impl Conductor {
    /// Axis-aligned box footprint.
    pub fn rect(name: &str, x: [f64; 2], y: [f64; 2], z: [f64; 2]) -> Self {
        Self {
            name: name.into(),
            footprint: vec![[x[0], y[0]], [x[1], y[0]], [x[1], y[1]], [x[0], y[1]]],
            z_bottom: z[0],
            z_top: z[1],
        }
    }

    /// Point-in-prism test; points on the boundary are inside.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let eps = 1e-9;
        if p[2] < self.z_bottom - eps || p[2] > self.z_top + eps {
            return false;
        }
        point_in_polygon([p[0], p[1]], &self.footprint, eps)
    }
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2], eps: f64) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt().max(eps);
    if cross.abs() / len > eps {
        return false;
    }
    let dot = (p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1]);
    dot >= -eps && dot <= len * len + eps
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]], eps: f64) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if on_segment(p, a, b, eps) {
            return true;
        }
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Node layout of the finite-difference grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: [usize; 3],
    /// nm.
    pub spacing: f64,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n[1] + j) * self.n[0] + i
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.n[0];
        let j = (idx / self.n[0]) % self.n[1];
        let k = idx / (self.n[0] * self.n[1]);
        [i, j, k]
    }

    pub fn position(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        [c[0] as f64 * self.spacing, c[1] as f64 * self.spacing, c[2] as f64 * self.spacing]
    }

    /// Nearest node to `r`.
    pub fn nearest(&self, r: [f64; 3]) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let u = (r[a] / self.spacing).round();
            if u < 0.0 || u > (self.n[a] - 1) as f64 {
                return None;
            }
            c[a] = u as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }

    /// Trilinear interpolation of a nodal field.
    pub fn interpolate(&self, values: &[f64], r: [f64; 3]) -> Result<f64, TriangulateError> {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = r[a] / self.spacing;
            let top = (self.n[a] - 1) as f64;
            if !(u >= -1e-9 && u <= top + 1e-9) {
                return Err(TriangulateError::OutsideDomain(r[0], r[1], r[2]));
            }
            let u = u.clamp(0.0, top);
            let b = (u.floor() as usize).min(self.n[a].saturating_sub(2));
            base[a] = b;
            frac[a] = if self.n[a] > 1 { u - b as f64 } else { 0.0 };
        }
        let mut v = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut c = [0usize; 3];
            for a in 0..3 {
                let bit = corner >> a & 1;
                c[a] = (base[a] + bit).min(self.n[a] - 1);
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                v += w * values[self.index(c[0], c[1], c[2])];
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceGeometry {
    /// Box size (x, y, z), nm.
    pub extent: [f64; 3],
    /// Grid spacing, nm.
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    pub gates: Vec<Conductor>,
    /// Grounded conductors such as the 2DEG reservoir layer.
    #[serde(default)]
    pub grounds: Vec<Conductor>,
}

fn default_spacing() -> f64 {
    2.0
}

impl DeviceGeometry {
    pub fn from_toml_str(s: &str) -> Result<Self, TriangulateError> {
        let g: Self = toml::from_str(s).map_err(|e| TriangulateError::Parse(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, TriangulateError> {
        let s = std::fs::read_to_string(path).map_err(|e| TriangulateError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<(), TriangulateError> {
        let bad = |m: String| Err(TriangulateError::InvalidGeometry(m));
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad(format!("spacing must be > 0, got {}", self.spacing));
        }
        if self.extent.iter().any(|e| !(*e >= self.spacing)) {
            return bad(format!("extent {:?} must be at least one grid spacing per axis", self.extent));
        }
        if self.gates.is_empty() {
            return bad("at least one gate is required".into());
        }
        let mut names = std::collections::HashSet::new();
        for c in self.gates.iter().chain(&self.grounds) {
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate conductor name `{}`", c.name));
            }
            if c.footprint.len() < 3 {
                return bad(format!("`{}` footprint needs at least 3 vertices", c.name));
            }
            let eps = 1e-9;
            for v in &c.footprint {
                if v[0] < -eps || v[1] < -eps || v[0] > self.extent[0] + eps || v[1] > self.extent[1] + eps {
                    return bad(format!("`{}` vertex ({}, {}) lies outside the domain", c.name, v[0], v[1]));
                }
            }
            if !(c.z_bottom <= c.z_top) || c.z_bottom < -eps || c.z_top > self.extent[2] + eps {
                return bad(format!("`{}` heights [{}, {}] outside [0, {}]", c.name, c.z_bottom, c.z_top, self.extent[2]));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        let n = self.extent.map(|e| (e / self.spacing).round() as usize + 1);
        GridSpec { n, spacing: self.spacing }
    }

    /// Conductor label per node: `Some(g)` for gate `g`, `Some(usize::MAX)`
    /// for grounds, `None` for free nodes.
    pub(crate) fn labels(&self) -> Vec<Option<usize>> {
        let grid = self.grid();
        (0..grid.len())
            .map(|idx| {
                let p = grid.position(idx);
                if let Some(g) = self.gates.iter().position(|c| c.contains(p)) {
                    Some(g)
                } else if self.grounds.iter().any(|c| c.contains(p)) {
                    Some(usize::MAX)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn gate_index(&self, name: &str) -> Result<usize, TriangulateError> {
        self.gates.iter().position(|g| g.name == name).ok_or_else(|| TriangulateError::UnknownGate(name.into()))
    }
}
