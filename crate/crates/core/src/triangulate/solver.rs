use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DeviceGeometry, GridSpec, TriangulateError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    /// Stop when ‖r‖₂ / (6·‖V‖₂) falls below this, with `r` the discrete
    /// Laplacian on free nodes.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Over-relaxation factor; chosen from the grid size when absent.
    #[serde(default)]
    pub omega: Option<f64>,
}

fn default_tolerance() -> f64 {
    1e-8
}

fn default_max_iterations() -> usize {
    50_000
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: default_tolerance(), max_iterations: default_max_iterations(), omega: None }
    }
}

/// Lever arm `∂V(r)/∂V_g` of one gate on every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialResponse {
    pub gate: String,
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl PotentialResponse {
    pub fn at(&self, r: [f64; 3]) -> Result<f64, TriangulateError> {
        self.grid.interpolate(&self.values, r)
    }
}

struct Stencil {
    grid: GridSpec,
    fixed: Vec<bool>,
}

impl Stencil {
    /// Sum of the six neighbours, mirrored at the lateral faces.
    #[inline]
    fn neighbour_sum(&self, v: &[f64], i: usize, j: usize, k: usize) -> f64 {
        let [nx, ny, _] = self.grid.n;
        let g = &self.grid;
        let xm = if i > 0 { i - 1 } else { (i + 1).min(nx - 1) };
        let xp = if i + 1 < nx { i + 1 } else { i.saturating_sub(1) };
        let ym = if j > 0 { j - 1 } else { (j + 1).min(ny - 1) };
        let yp = if j + 1 < ny { j + 1 } else { j.saturating_sub(1) };
        v[g.index(xm, j, k)] + v[g.index(xp, j, k)] + v[g.index(i, ym, k)] + v[g.index(i, yp, k)]
            + v[g.index(i, j, k - 1)]
            + v[g.index(i, j, k + 1)]
    }

    fn relative_residual(&self, v: &[f64]) -> f64 {
        let [nx, ny, nz] = self.grid.n;
        let mut r2 = 0.0;
        for k in 1..nz - 1 {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = self.grid.index(i, j, k);
                    if !self.fixed[idx] {
                        let r = self.neighbour_sum(v, i, j, k) - 6.0 * v[idx];
                        r2 += r * r;
                    }
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            0.0
        } else {
            r2.sqrt() / (6.0 * norm)
        }
    }
}

/// Potential with gate `g` at `voltages[g]`, grounds and the top and bottom
/// faces at zero, by red–black successive over-relaxation.
pub fn solve_potential(
    geometry: &DeviceGeometry,
    voltages: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<f64>, f64, usize), TriangulateError> {
    geometry.validate()?;
    if voltages.len() != geometry.gates.len() {
        return Err(TriangulateError::InvalidGeometry(format!(
            "{} voltages for {} gates",
            voltages.len(),
            geometry.gates.len()
        )));
    }
    let grid = geometry.grid();
    let labels = geometry.labels();
    solve_labelled(grid, &labels, voltages, opts)
}

fn solve_labelled(
    grid: GridSpec,
    labels: &[Option<usize>],
    voltages: &[f64],
    opts: &SolverOptions,
) -> Result<(Vec<f64>, f64, usize), TriangulateError> {
    let [nx, ny, nz] = grid.n;
    let mut v = vec![0.0; grid.len()];
    let mut fixed = vec![false; grid.len()];
    for (idx, l) in labels.iter().enumerate() {
        let k = grid.coords(idx)[2];
        match l {
            Some(g) if *g != usize::MAX => {
                v[idx] = voltages[*g];
                fixed[idx] = true;
            }
            Some(_) => fixed[idx] = true,
            None => fixed[idx] = k == 0 || k == nz - 1,
        }
    }
    let st = Stencil { grid, fixed };
    if nz < 3 {
        let res = st.relative_residual(&v);
        return Ok((v, res, 0));
    }
    let longest = (2 * nx).max(2 * ny).max(nz) as f64;
    let omega = opts.omega.unwrap_or(2.0 / (1.0 + (PI / longest).sin()));
    let mut sweeps = 0;
    loop {
        for colour in 0..2 {
            for k in 1..nz - 1 {
                for j in 0..ny {
                    let start = (colour + j + k) % 2;
                    let mut i = start;
                    while i < nx {
                        let idx = grid.index(i, j, k);
                        if !st.fixed[idx] {
                            let gs = st.neighbour_sum(&v, i, j, k) / 6.0;
                            v[idx] += omega * (gs - v[idx]);
                        }
                        i += 2;
                    }
                }
            }
        }
        sweeps += 1;
        if sweeps % 10 == 0 || sweeps >= opts.max_iterations {
            let res = st.relative_residual(&v);
            if res < opts.tolerance {
                return Ok((v, res, sweeps));
            }
            if sweeps >= opts.max_iterations {
                return Err(TriangulateError::NonConvergence { iterations: sweeps, residual: res });
            }
        }
    }
}

/// One unit-voltage solve per gate, in parallel.
pub fn solve_responses(geometry: &DeviceGeometry, opts: &SolverOptions) -> Result<Vec<PotentialResponse>, TriangulateError> {
    geometry.validate()?;
    let grid = geometry.grid();
    let labels = geometry.labels();
    (0..geometry.gates.len())
        .into_par_iter()
        .map(|g| {
            let mut volts = vec![0.0; geometry.gates.len()];
            volts[g] = 1.0;
            let (values, residual, iterations) = solve_labelled(grid, &labels, &volts, opts)?;
            Ok(PotentialResponse { gate: geometry.gates[g].name.clone(), grid, values, residual, iterations })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triangulate::Conductor;

    fn plate() -> DeviceGeometry {
        DeviceGeometry {
            extent: [10.0, 10.0, 40.0],
            spacing: 2.0,
            gates: vec![Conductor::rect("top", [0.0, 10.0], [0.0, 10.0], [40.0, 40.0])],
            grounds: vec![],
        }
    }

    #[test]
    fn parallel_plate_is_linear() {
        let r = solve_responses(&plate(), &SolverOptions::default()).unwrap();
        let resp = &r[0];
        assert!(resp.residual < 1e-6);
        for z in [2.0, 10.0, 17.0, 31.0] {
            let v = resp.at([5.0, 5.0, z]).unwrap();
            assert!((v - z / 40.0).abs() < 0.01 * (z / 40.0), "{z}: {v}");
        }
    }

    fn twin() -> DeviceGeometry {
        DeviceGeometry {
            extent: [40.0, 20.0, 20.0],
            spacing: 2.0,
            gates: vec![
                Conductor::rect("left", [4.0, 14.0], [6.0, 14.0], [16.0, 18.0]),
                Conductor::rect("right", [26.0, 36.0], [6.0, 14.0], [16.0, 18.0]),
            ],
            grounds: vec![Conductor::rect("2deg", [0.0, 40.0], [0.0, 20.0], [2.0, 2.0])],
        }
    }

    #[test]
    fn superposition_and_boundary_values() {
        let g = twin();
        let opts = SolverOptions { tolerance: 1e-11, ..SolverOptions::default() };
        let r = solve_responses(&g, &opts).unwrap();
        let (both, _, _) = solve_potential(&g, &[1.0, 1.0], &opts).unwrap();
        let scale = both.iter().cloned().fold(0.0, f64::max);
        for (i, b) in both.iter().enumerate() {
            assert!((b - r[0].values[i] - r[1].values[i]).abs() < 1e-6 * scale);
        }
        let labels = g.labels();
        for (i, l) in labels.iter().enumerate() {
            match l {
                Some(0) => assert_eq!(r[0].values[i], 1.0),
                Some(1) => assert_eq!(r[0].values[i], 0.0),
                _ => assert!(r[0].values[i] >= -1e-9 && r[0].values[i] <= 1.0 + 1e-9),
            }
        }
    }

    #[test]
    fn iteration_cap_is_reported() {
        let opts = SolverOptions { max_iterations: 3, ..SolverOptions::default() };
        assert!(matches!(solve_responses(&twin(), &opts), Err(TriangulateError::NonConvergence { .. })));
    }
}
