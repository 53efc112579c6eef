use std::f64::consts::{PI, TAU};

use super::{levenberg_marquardt, Dataset, FitError, FitResult, LmOptions, LmSolution};

/// `P·exp(−(t/T)^β) + P∞`.
pub fn stretched_exp_value(t: f64, p: f64, t2: f64, beta: f64, p_inf: f64) -> f64 {
    p * (-(t / t2).abs().powf(beta)).exp() + p_inf
}

fn best_of(
    model: &dyn Fn(f64, &[f64]) -> f64,
    data: &Dataset,
    starts: &[Vec<f64>],
) -> Result<LmSolution, FitError> {
    let opts = LmOptions::default();
    let mut best: Option<LmSolution> = None;
    let mut last_err = FitError::NonConvergence { iterations: 0 };
    for s in starts {
        match levenberg_marquardt(model, data, s, &opts) {
            Ok(sol) => {
                if best.as_ref().is_none_or(|b| sol.residual_norm < b.residual_norm) {
                    best = Some(sol);
                }
            }
            Err(e) => last_err = e,
        }
    }
    best.ok_or(last_err)
}

/// Time at which the normalised decay first falls below `level`.
fn crossing(data: &Dataset, start: f64, end: f64, level: f64) -> f64 {
    let span = end - start;
    data.x
        .iter()
        .zip(&data.y)
        .find(|(_, y)| span.abs() > 0.0 && (*y - end) / span < level)
        .map(|(x, _)| *x)
        .unwrap_or_else(|| data.x[data.len() / 2])
        .max(data.x[1] - data.x[0])
}

fn tail_mean(y: &[f64]) -> f64 {
    let k = (y.len() / 10).max(1);
    y[y.len() - k..].iter().sum::<f64>() / k as f64
}

/// Least-squares slope of `y` on `x`.
fn slope(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let s = sxy / sxx;
    Some((s, my - s * mx))
}

/// Fits `P·exp(−(t/T₂)^β) + P∞`; parameters `P`, `T2`, `beta`, `P_inf`.
///
/// Starting points come from a log-log regression of the normalised decay
/// plus a small grid in β.
pub fn fit_stretched_exp(data: &Dataset) -> Result<FitResult, FitError> {
    data.validate_increasing()?;
    if data.len() < 5 {
        return Err(FitError::TooFewPoints { need: 5, got: data.len() });
    }
    let p_inf = tail_mean(&data.y);
    let p = data.y[0] - p_inf;
    let mut starts = Vec::new();
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (x, y) in data.x.iter().zip(&data.y) {
        let frac = (y - p_inf) / p;
        if *x > 0.0 && frac > 0.05 && frac < 0.95 {
            lx.push(x.ln());
            ly.push((-frac.ln()).ln());
        }
    }
    if let Some((beta, c)) = slope(&lx, &ly) {
        if beta > 0.0 && beta.is_finite() {
            starts.push(vec![p, (-c / beta).exp(), beta, p_inf]);
        }
    }
    let t_e = crossing(data, data.y[0], p_inf, (-1.0f64).exp());
    for beta in [1.0, 2.0, 0.7, 3.0] {
        starts.push(vec![p, t_e, beta, p_inf]);
    }
    let model = |t: f64, q: &[f64]| stretched_exp_value(t, q[0], q[1], q[2].abs(), q[3]);
    let sol = best_of(&model, data, &starts)?;
    Ok(sol.into_result("stretched_exp", &["P", "T2", "beta", "P_inf"], |q| vec![q[0], q[1].abs(), q[2].abs(), q[3]]))
}

/// Fits `A·exp(−t/τ) + B`; parameters `A`, `tau`, `B`.
pub fn fit_exponential(data: &Dataset) -> Result<FitResult, FitError> {
    data.validate_increasing()?;
    if data.len() < 4 {
        return Err(FitError::TooFewPoints { need: 4, got: data.len() });
    }
    let b = tail_mean(&data.y);
    let a = data.y[0] - b;
    let t_e = crossing(data, data.y[0], b, (-1.0f64).exp());
    let span = data.x[data.len() - 1] - data.x[0];
    let starts = vec![vec![a, t_e, b], vec![a, span, b], vec![a, 3.0 * span, 0.0]];
    let model = |t: f64, q: &[f64]| q[0] * (-t / q[1]).exp() + q[2];
    let sol = best_of(&model, data, &starts)?;
    Ok(sol.into_result("exponential", &["A", "tau", "B"], |q| q.to_vec()))
}

/// Frequency of the largest periodogram peak of the mean-removed samples.
fn spectral_peak(data: &Dataset) -> f64 {
    let n = data.len();
    let span = data.x[n - 1] - data.x[0];
    let mean = data.y.iter().sum::<f64>() / n as f64;
    let f_max = 0.5 * (n - 1) as f64 / span;
    let df = 1.0 / (10.0 * span);
    let power = |f: f64| {
        let (mut c, mut s) = (0.0, 0.0);
        for (x, y) in data.x.iter().zip(&data.y) {
            let ph = TAU * f * x;
            c += (y - mean) * ph.cos();
            s += (y - mean) * ph.sin();
        }
        c * c + s * s
    };
    let mut best = (df, 0.0);
    let mut f = 0.5 / span;
    while f <= f_max {
        let pw = power(f);
        if pw > best.1 {
            best = (f, pw);
        }
        f += df;
    }
    best.0
}

/// Linear least squares for `a·sin(ωt) + b·cos(ωt) + c`.
fn sin_cos_fit(data: &Dataset, f: f64) -> (f64, f64, f64) {
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut v = nalgebra::Vector3::<f64>::zeros();
    for (x, y) in data.x.iter().zip(&data.y) {
        let row = nalgebra::Vector3::new((TAU * f * x).sin(), (TAU * f * x).cos(), 1.0);
        m += row * row.transpose();
        v += row * *y;
    }
    let sol = m.lu().solve(&v).unwrap_or_default();
    (sol[0], sol[1], sol[2])
}

fn wrap_phase(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Fits `P·exp(−t/τ)·sin(2πft + φ) + P∞`; parameters `P`, `tau`, `f`, `phi`,
/// `P_inf`. The frequency starts at the periodogram peak; `tau` is infinite
/// when the fitted decay rate is not positive.
pub fn fit_damped_sinusoid(data: &Dataset) -> Result<FitResult, FitError> {
    data.validate_increasing()?;
    if data.len() < 6 {
        return Err(FitError::TooFewPoints { need: 6, got: data.len() });
    }
    let span = data.x[data.len() - 1] - data.x[0];
    let f0 = spectral_peak(data);
    if f0 * span < 2.0 {
        return Err(FitError::InvalidData(format!("fewer than two periods sampled (f·span = {:.2})", f0 * span)));
    }
    let (a, b, c) = sin_cos_fit(data, f0);
    let p = a.hypot(b);
    let phi = b.atan2(a);
    // decay as a rate so that a pure sinusoid sits at an interior point
    let starts: Vec<Vec<f64>> = [0.0, 0.3 / span, 2.0 / span].iter().map(|g| vec![p, *g, f0, phi, c]).collect();
    let model = |t: f64, q: &[f64]| q[0] * (-q[1] * t).exp() * (TAU * q[2] * t + q[3]).sin() + q[4];
    let sol = best_of(&model, data, &starts)?;
    let gamma = sol.params[1];
    let sigma_gamma = sol.covariance[(1, 1)].max(0.0).sqrt();
    let mut res = sol.into_result("damped_sinusoid", &["P", "tau", "f", "phi", "P_inf"], |q| {
        let (mut amp, mut ph) = (q[0], q[3]);
        if amp < 0.0 {
            amp = -amp;
            ph += PI;
        }
        let tau = if q[1] > 0.0 { 1.0 / q[1] } else { f64::INFINITY };
        vec![amp, tau, q[2], wrap_phase(ph), q[4]]
    });
    res.params[1].sigma = if gamma > 0.0 { sigma_gamma / (gamma * gamma) } else { f64::INFINITY };
    Ok(res)
}

/// `offset + Σ aᵢ·exp(−(x − μᵢ)²/(2σᵢ²))` with `p = [a₁, μ₁, σ₁, …, offset]`.
pub fn gaussian_mixture_value(x: f64, p: &[f64]) -> f64 {
    let n = (p.len() - 1) / 3;
    let mut v = p[3 * n];
    for i in 0..n {
        let (a, mu, s) = (p[3 * i], p[3 * i + 1], p[3 * i + 2]);
        v += a * (-(x - mu).powi(2) / (2.0 * s * s)).exp();
    }
    v
}

pub fn fwhm(sigma: f64) -> f64 {
    2.0 * (2.0 * 2f64.ln()).sqrt() * sigma.abs()
}

/// Width left after removing a reference width in quadrature.
pub fn excess_width(width: f64, reference: f64) -> Result<f64, FitError> {
    if width < reference {
        return Err(FitError::InvalidData(format!("width {width} is below the reference {reference}")));
    }
    Ok((width * width - reference * reference).sqrt())
}

/// Fits `n_peaks` ∈ {1, 2, 3} Gaussians on a constant background; parameters
/// `amplitude_i`, `mean_i`, `sigma_i` (sorted by mean) and `offset`.
pub fn fit_gaussian_mixture(data: &Dataset, n_peaks: usize) -> Result<FitResult, FitError> {
    data.validate()?;
    if !(1..=3).contains(&n_peaks) {
        return Err(FitError::InvalidData(format!("n_peaks must be 1, 2 or 3, got {n_peaks}")));
    }
    let k = 3 * n_peaks + 1;
    if data.len() < k + 1 {
        return Err(FitError::TooFewPoints { need: k + 1, got: data.len() });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|a, b| data.x[*a].total_cmp(&data.x[*b]));
    let xs: Vec<f64> = order.iter().map(|i| data.x[*i]).collect();
    let ys: Vec<f64> = order.iter().map(|i| data.y[*i]).collect();
    let offset = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = xs[xs.len() - 1] - xs[0];
    let mut resid: Vec<f64> = ys.iter().map(|y| y - offset).collect();
    let mut p0 = Vec::with_capacity(k);
    for _ in 0..n_peaks {
        let (imax, amax) = resid.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, v)| if *v > b.1 { (i, *v) } else { b });
        let half = 0.5 * amax;
        let mut lo = imax;
        while lo > 0 && resid[lo] > half {
            lo -= 1;
        }
        let mut hi = imax;
        while hi + 1 < resid.len() && resid[hi] > half {
            hi += 1;
        }
        let width = ((xs[hi] - xs[lo]) / fwhm(1.0)).max(span / (10.0 * xs.len() as f64));
        let mu = xs[imax];
        p0.extend([amax, mu, width]);
        for (r, x) in resid.iter_mut().zip(&xs) {
            *r -= amax * (-(x - mu).powi(2) / (2.0 * width * width)).exp();
        }
    }
    p0.push(offset);
    let model = |x: f64, q: &[f64]| gaussian_mixture_value(x, q);
    let sol = levenberg_marquardt(&model, data, &p0, &LmOptions::default())?;
    let q = &sol.params;
    let mut peaks: Vec<usize> = (0..n_peaks).collect();
    peaks.sort_by(|a, b| q[3 * a + 1].total_cmp(&q[3 * b + 1]));
    for w in peaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let sep = q[3 * b + 1] - q[3 * a + 1];
        if sep < 0.5 * q[3 * a + 2].abs().min(q[3 * b + 2].abs()) {
            return Err(FitError::Degenerate(format!("peaks {a} and {b} overlap (separation {sep:.3e})")));
        }
    }
    let mut names = Vec::with_capacity(k);
    for i in 1..=n_peaks {
        names.push(format!("amplitude_{i}"));
        names.push(format!("mean_{i}"));
        names.push(format!("sigma_{i}"));
    }
    names.push("offset".into());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    // reorder covariance along with the peaks
    let mut idx: Vec<usize> = peaks.iter().flat_map(|p| [3 * p, 3 * p + 1, 3 * p + 2]).collect();
    idx.push(3 * n_peaks);
    let cov = nalgebra::DMatrix::from_fn(k, k, |i, j| sol.covariance[(idx[i], idx[j])]);
    let params: Vec<f64> = idx.iter().map(|i| sol.params[*i]).collect();
    let sorted = LmSolution { params, covariance: cov, ..sol };
    Ok(sorted.into_result("gaussian_mixture", &refs, |q| {
        let mut v = q.to_vec();
        for i in 0..n_peaks {
            v[3 * i + 2] = v[3 * i + 2].abs();
        }
        v
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, Normal};

    fn grid(start: f64, end: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| start + (end - start) * i as f64 / (n - 1) as f64).collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn stretched_exp_exact_recovery() {
        for (t2, beta, span) in [(184.0, 2.0, 400.0), (4.09, 1.28, 15.0)] {
            let data = Dataset::from_fn(grid(0.0, span, 40), |t| stretched_exp_value(t, 0.8, t2, beta, 0.1));
            let fit = fit_stretched_exp(&data).unwrap();
            assert!(rel(fit.value("T2"), t2) < 1e-6, "{fit:?}");
            assert!(rel(fit.value("beta"), beta) < 1e-6);
            assert!(rel(fit.value("P"), 0.8) < 1e-6);
            assert!(rel(fit.value("P_inf"), 0.1) < 1e-6);
        }
    }

    #[test]
    fn stretched_exp_noise_robustness() {
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut good = 0;
        for trial in 0..100 {
            let mut rng = stream(11, "fit-noise", trial);
            let mut data = Dataset::from_fn(grid(0.0, 450.0, 30), |t| stretched_exp_value(t, 1.0, 184.0, 2.0, 0.0));
            for y in &mut data.y {
                *y += noise.sample(&mut rng);
            }
            if let Ok(fit) = fit_stretched_exp(&data) {
                if rel(fit.value("T2"), 184.0) < 0.15 {
                    good += 1;
                }
            }
        }
        assert!(good >= 95, "{good}/100");
    }

    #[test]
    fn exponential_exact_recovery() {
        let data = Dataset::from_fn(grid(0.0, 30.0, 25), |t| 0.9 * (-t / 6.22).exp() + 0.05);
        let fit = fit_exponential(&data).unwrap();
        assert!(rel(fit.value("tau"), 6.22) < 1e-6);
        assert!(rel(fit.value("A"), 0.9) < 1e-6);
    }

    #[test]
    fn damped_sinusoid_exact_recovery() {
        let f = 0.1185;
        let data = Dataset::from_fn(grid(0.0, 40.0, 120), |t| 0.45 * (-t / 25.0).exp() * (TAU * f * t + 0.3).sin() + 0.5);
        let fit = fit_damped_sinusoid(&data).unwrap();
        assert!(rel(fit.value("f"), f) < 1e-6, "{fit:?}");
        assert!(rel(fit.value("tau"), 25.0) < 1e-6);
        assert!(rel(fit.value("P"), 0.45) < 1e-6);
        assert!((fit.value("phi") - 0.3).abs() < 1e-6);
    }

    #[test]
    fn pure_sinusoid_has_long_tau() {
        let data = Dataset::from_fn(grid(0.0, 40.0, 100), |t| 0.5 * (TAU * 0.1185 * t - 1.2).sin() + 0.5);
        let fit = fit_damped_sinusoid(&data).unwrap();
        assert!(fit.value("tau") > 40.0);
        assert!(rel(fit.value("f"), 0.1185) < 1e-6);
    }

    #[test]
    fn sinusoid_needs_two_periods() {
        let data = Dataset::from_fn(grid(0.0, 10.0, 50), |t| (TAU * 0.1 * t).sin());
        assert!(matches!(fit_damped_sinusoid(&data), Err(FitError::InvalidData(_))));
    }

    #[test]
    fn single_gaussian_exact() {
        let p = [2.0, 1.3, 0.2, 0.1];
        let data = Dataset::from_fn(grid(0.0, 3.0, 60), |x| gaussian_mixture_value(x, &p));
        let fit = fit_gaussian_mixture(&data, 1).unwrap();
        assert!(rel(fit.value("mean_1"), 1.3) < 1e-6);
        assert!(rel(fit.value("sigma_1"), 0.2) < 1e-6);
        assert!(rel(fit.value("amplitude_1"), 2.0) < 1e-6);
    }

    #[test]
    fn two_gaussians_separation() {
        let s = 0.1;
        let sep = 3.0 * fwhm(s);
        let p = [1.0, 0.0, s, 0.7, sep, s * 1.2, 0.0];
        let data = Dataset::from_fn(grid(-0.6, sep + 0.6, 120), |x| gaussian_mixture_value(x, &p));
        let fit = fit_gaussian_mixture(&data, 2).unwrap();
        let got = fit.value("mean_2") - fit.value("mean_1");
        assert!(rel(got, sep) < 0.01);
    }

    #[test]
    fn broadening_extraction() {
        let s_ref: f64 = 0.05;
        let excess = 0.08;
        let s_drive = (s_ref * s_ref + excess * excess).sqrt();
        let make = |s: f64| Dataset::from_fn(grid(-1.0, 1.0, 200), |x| gaussian_mixture_value(x, &[1.0, 0.0, s, 0.0]));
        let w_ref = fwhm(fit_gaussian_mixture(&make(s_ref), 1).unwrap().value("sigma_1"));
        let w = fwhm(fit_gaussian_mixture(&make(s_drive), 1).unwrap().value("sigma_1"));
        let got = excess_width(w, w_ref).unwrap();
        assert!(rel(got, fwhm(excess)) < 0.02);
    }

    #[test]
    fn covariance_shrinks_with_points() {
        let noise = Normal::new(0.0, 0.02).unwrap();
        let var = |n: usize| {
            let mut rng = stream(12, "cov", n as u64);
            let mut d = Dataset::from_fn(grid(0.0, 30.0, n), |t| 0.9 * (-t / 6.0).exp() + 0.05);
            for y in &mut d.y {
                *y += noise.sample(&mut rng);
            }
            let d = d.with_errors(vec![0.02; n]).unwrap();
            fit_exponential(&d).unwrap().sigma("tau").unwrap().powi(2)
        };
        let ratio = var(40) / var(160);
        assert!((ratio - 4.0).abs() < 0.8, "{ratio}");
    }

    #[test]
    fn fits_are_deterministic() {
        let data = Dataset::from_fn(grid(0.0, 40.0, 60), |t| 0.3 * (-t / 20.0).exp() * (TAU * 0.2 * t).sin());
        assert_eq!(fit_damped_sinusoid(&data).unwrap(), fit_damped_sinusoid(&data).unwrap());
    }
}
