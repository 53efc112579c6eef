use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GridSpec, PotentialResponse, TriangulateError};

/// Measured transition slope for sweeping `swept` against `reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeMeasurement {
    pub swept: String,
    pub reference: String,
    pub slope: f64,
}

impl SlopeMeasurement {
    pub fn sigma(&self) -> f64 {
        slope_sigma(self.slope)
    }
}

/// Slope uncertainty `1 + 1/s²`: steep slopes are trusted more.
pub fn slope_sigma(s: f64) -> f64 {
    1.0 + 1.0 / (s * s)
}

/// Axis-aligned box, nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Region {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - 1e-9 && p[a] <= self.max[a] + 1e-9)
    }
}

fn find<'a>(responses: &'a [PotentialResponse], gate: &str) -> Result<&'a PotentialResponse, TriangulateError> {
    responses.iter().find(|r| r.gate == gate).ok_or_else(|| TriangulateError::UnknownGate(gate.into()))
}

/// `s = −R_ref(r) / R_swept(r)`.
pub fn predicted_slope(
    responses: &[PotentialResponse],
    swept: &str,
    reference: &str,
    r: [f64; 3],
) -> Result<f64, TriangulateError> {
    let a1 = find(responses, swept)?.at(r)?;
    let a2 = find(responses, reference)?.at(r)?;
    if a1.abs() < 1e-12 {
        return Err(TriangulateError::Screened { gate: swept.into(), x: r[0], y: r[1], z: r[2] });
    }
    Ok(-a2 / a1)
}

/// Normalized probability over grid nodes; zero outside the candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMap {
    pub grid: GridSpec,
    pub p: Vec<f64>,
}

/// Slope likelihood on every free node (inside `candidates` when given),
/// multiplied by the optional prior mask and normalized to unit sum.
pub fn likelihood_map(
    measurements: &[SlopeMeasurement],
    responses: &[PotentialResponse],
    candidates: Option<Region>,
    prior: Option<&[Region]>,
) -> Result<LikelihoodMap, TriangulateError> {
    if measurements.len() < 2 {
        return Err(TriangulateError::TooFewPairs { need: 2, got: measurements.len() });
    }
    let first = responses.first().ok_or(TriangulateError::EmptyMap)?;
    let grid = first.grid;
    let pairs = measurements
        .iter()
        .map(|m| {
            if !m.slope.is_finite() || m.slope == 0.0 {
                return Err(TriangulateError::InvalidGeometry(format!("slope {} for {}/{}", m.slope, m.swept, m.reference)));
            }
            Ok((&find(responses, &m.swept)?.values, &find(responses, &m.reference)?.values, m.slope, m.sigma()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let conductor: Vec<bool> = (0..grid.len())
        .map(|i| responses.iter().any(|r| r.values[i] == 1.0) || is_grounded_face(&grid, i))
        .collect();
    let log: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if conductor[i] {
                return f64::NEG_INFINITY;
            }
            let pos = grid.position(i);
            if candidates.is_some_and(|c| !c.contains(pos)) {
                return f64::NEG_INFINITY;
            }
            if prior.is_some_and(|regions| !regions.iter().any(|r| r.contains(pos))) {
                return f64::NEG_INFINITY;
            }
            let mut chi2 = 0.0;
            for (v1, v2, s, sigma) in &pairs {
                if v1[i].abs() < 1e-12 {
                    return f64::NEG_INFINITY;
                }
                let sim = -v2[i] / v1[i];
                chi2 += ((sim - s) / sigma).powi(2);
            }
            -0.5 * chi2
        })
        .collect();
    let peak = log.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(TriangulateError::EmptyMap);
    }
    let mut p: Vec<f64> = log.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    Ok(LikelihoodMap { grid, p })
}

fn is_grounded_face(grid: &GridSpec, i: usize) -> bool {
    let k = grid.coords(i)[2];
    k == 0 || k + 1 == grid.n[2]
}

/// Highest-probability set reaching `mass`, with per-axis extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleRegion {
    pub argmax: [f64; 3],
    pub argmax_index: usize,
    pub mass: f64,
    pub cells: Vec<usize>,
    /// (min, max) per axis, nm.
    pub intervals: [[f64; 2]; 3],
}

/// Smallest level set of `P` holding at least `mass`. Cells tied with the
/// last one admitted are kept, so a flat map returns every candidate.
pub fn argmax_region(map: &LikelihoodMap, mass: f64) -> CredibleRegion {
    let mut order: Vec<usize> = (0..map.p.len()).filter(|&i| map.p[i] > 0.0).collect();
    order.sort_by(|&a, &b| map.p[b].total_cmp(&map.p[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut cells = Vec::new();
    let mut level = f64::INFINITY;
    for &i in &order {
        let v = map.p[i];
        if acc >= mass && v < level * (1.0 - 1e-12) {
            break;
        }
        acc += v;
        level = v;
        cells.push(i);
    }
    let argmax_index = order.first().copied().unwrap_or(0);
    let mut intervals = [[f64::INFINITY, f64::NEG_INFINITY]; 3];
    for &c in &cells {
        let p = map.grid.position(c);
        for a in 0..3 {
            intervals[a][0] = intervals[a][0].min(p[a]);
            intervals[a][1] = intervals[a][1].max(p[a]);
        }
    }
    CredibleRegion { argmax: map.grid.position(argmax_index), argmax_index, mass: acc, cells, intervals }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub argmax: [f64; 3],
    pub max_probability: f64,
    pub target_mass: f64,
    pub region_mass: f64,
    pub region_cells: usize,
    pub intervals: [[f64; 2]; 3],
    pub spacing: f64,
}

/// CSV of `x,y,z,p` over candidate nodes.
pub fn write_map_csv<W: Write>(map: &LikelihoodMap, writer: W) -> Result<(), TriangulateError> {
    let io = |e: csv::Error| TriangulateError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x_nm", "y_nm", "z_nm", "p"]).map_err(io)?;
    for (i, &p) in map.p.iter().enumerate() {
        if p > 0.0 {
            let r = map.grid.position(i);
            w.write_record([r[0].to_string(), r[1].to_string(), r[2].to_string(), format!("{p:e}")]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| TriangulateError::Io(e.to_string()))
}

pub fn map_summary(map: &LikelihoodMap, region: &CredibleRegion, target: f64) -> MapSummary {
    MapSummary {
        argmax: region.argmax,
        max_probability: map.p[region.argmax_index],
        target_mass: target,
        region_mass: region.mass,
        region_cells: region.cells.len(),
        intervals: region.intervals,
        spacing: map.grid.spacing,
    }
}

pub fn write_summary_json<W: Write>(
    map: &LikelihoodMap,
    region: &CredibleRegion,
    target: f64,
    writer: W,
) -> Result<MapSummary, TriangulateError> {
    let summary = map_summary(map, region, target);
    serde_json::to_writer_pretty(writer, &summary).map_err(|e| TriangulateError::Io(e.to_string()))?;
    Ok(summary)
}
