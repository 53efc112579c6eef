use nalgebra::{DMatrix, DVector};

use super::{Dataset, FitError, FitParam, FitResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when every relative parameter step is below this.
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 1000, step_tolerance: 1e-13, initial_damping: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmSolution {
    pub params: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// √χ² of the weighted residuals.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn residuals(model: &dyn Fn(f64, &[f64]) -> f64, data: &Dataset, p: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        data.len(),
        (0..data.len()).map(|i| {
            let w = data.y_err.as_ref().map_or(1.0, |e| e[i]);
            (data.y[i] - model(data.x[i], p)) / w
        }),
    )
}

/// Jacobian of the model (not the residual), weighted, by central differences.
fn jacobian(model: &dyn Fn(f64, &[f64]) -> f64, data: &Dataset, p: &[f64]) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(data.len(), p.len());
    let mut q = p.to_vec();
    for k in 0..p.len() {
        let h = 1e-7 * p[k].abs().max(1e-7);
        q[k] = p[k] + h;
        let up: Vec<f64> = data.x.iter().map(|&x| model(x, &q)).collect();
        q[k] = p[k] - h;
        let dn: Vec<f64> = data.x.iter().map(|&x| model(x, &q)).collect();
        q[k] = p[k];
        for i in 0..data.len() {
            let w = data.y_err.as_ref().map_or(1.0, |e| e[i]);
            j[(i, k)] = (up[i] - dn[i]) / (2.0 * h * w);
        }
    }
    j
}

/// Levenberg–Marquardt minimisation of Σ((y − model(x, p))/σ)².
///
/// The covariance is `(JᵀJ)⁻¹`, scaled by the reduced χ² when the data carry
/// no errors.
pub fn levenberg_marquardt(
    model: &dyn Fn(f64, &[f64]) -> f64,
    data: &Dataset,
    p0: &[f64],
    opts: &LmOptions,
) -> Result<LmSolution, FitError> {
    data.validate()?;
    let n = data.len();
    let k = p0.len();
    if n < k {
        return Err(FitError::TooFewPoints { need: k, got: n });
    }
    let mut p = p0.to_vec();
    let mut r = residuals(model, data, &p);
    if r.iter().any(|v| !v.is_finite()) {
        return Err(FitError::InvalidData("model is not finite at the starting point".into()));
    }
    let mut chi2 = r.norm_squared();
    let scale = data.y.iter().map(|y| y * y).sum::<f64>().max(1e-300);
    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations && !converged {
        iterations += 1;
        let j = jacobian(model, data, &p);
        let a = j.transpose() * &j;
        let g = j.transpose() * &r;
        let diag_floor = a.diagonal().max() * 1e-15;
        loop {
            let mut m = a.clone();
            for d in 0..k {
                m[(d, d)] += lambda * a[(d, d)].max(diag_floor).max(1e-300);
            }
            let step = m.cholesky().map(|c| c.solve(&g));
            let Some(step) = step else {
                lambda *= 10.0;
                if lambda > 1e20 {
                    break;
                }
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let r_new = residuals(model, data, &trial);
            let chi2_new = r_new.norm_squared();
            if chi2_new.is_finite() && chi2_new <= chi2 {
                let small = trial.iter().zip(step.iter()).all(|(t, s)| s.abs() <= opts.step_tolerance * t.abs().max(1e-30));
                let stalled = chi2 - chi2_new <= 1e-15 * chi2;
                p = trial;
                r = r_new;
                chi2 = chi2_new;
                lambda = (lambda / 3.0).max(1e-15);
                if small || stalled || chi2 <= 1e-30 * scale {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e20 {
                // no downhill step left: a minimum to working precision
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(FitError::NonConvergence { iterations });
    }
    let j = jacobian(model, data, &p);
    let a = j.transpose() * &j;
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin < smax * 1e-14 {
        return Err(FitError::RankDeficient);
    }
    let inv = svd.pseudo_inverse(0.0).map_err(|_| FitError::RankDeficient)?;
    let s2 = if data.y_err.is_some() { 1.0 } else if n > k { chi2 / (n - k) as f64 } else { 0.0 };
    let cov = inv * s2;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(LmSolution { params: p, covariance: cov, residual_norm: chi2.sqrt(), iterations, converged })
}

impl LmSolution {
    /// Packages the solution with parameter names; `transform` maps the raw
    /// parameter vector to reported values (for sign-folded parameters).
    pub(crate) fn into_result(self, model: &str, names: &[&str], transform: impl Fn(&[f64]) -> Vec<f64>) -> FitResult {
        let values = transform(&self.params);
        let params = names
            .iter()
            .enumerate()
            .map(|(i, n)| FitParam { name: (*n).into(), value: values[i], sigma: self.covariance[(i, i)].max(0.0).sqrt() })
            .collect();
        let covariance = (0..self.covariance.nrows())
            .map(|i| (0..self.covariance.ncols()).map(|j| self.covariance[(i, j)]).collect())
            .collect();
        FitResult {
            model: model.into(),
            params,
            covariance,
            residual_norm: self.residual_norm,
            converged: self.converged,
            iterations: self.iterations,
        }
    }
}
