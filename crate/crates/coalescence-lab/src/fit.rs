//! Damped least-squares (Levenberg-Marquardt) recovery of source
//! parameters from spectra and decay histograms: Lorentzian lines and
//! one-sided-exponential decays convolved with a Gaussian detector
//! response (exponentially modified Gaussian), with analytic Jacobians.

use crate::numeric;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("detector FWHM must be positive when fixed, got {0} ns")]
    InvalidDetectorWidth(f64),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FittedParam {
    pub name: &'static str,
    pub value: f64,
    /// 1-sigma uncertainty from the local quadratic approximation at the
    /// optimum, scaled by sqrt(residual variance).
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub parameters: Vec<FittedParam>,
    pub residual_sum: f64,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<&FittedParam> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Detector timing response handling in decay fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorResponse {
    /// Gaussian FWHM known from calibration, ns.
    Known(f64),
    /// FWHM fitted alongside the decay parameters.
    Free,
}

struct LmOutcome {
    params: Vec<f64>,
    sigmas: Vec<f64>,
    rss: f64,
    converged: bool,
    iterations: usize,
    singular_covariance: bool,
}

/// Gaussian elimination with partial pivoting; None when singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite matrix")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut sum = b[col];
        for k in (col + 1)..n {
            sum -= a[col][k] * x[k];
        }
        x[col] = sum / a[col][col];
    }
    Some(x)
}

fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(solve_linear(a.to_vec(), e)?);
    }
    // cols[j] is the j-th column of the inverse.
    let mut inv = vec![vec![0.0; n]; n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..n {
            inv[i][j] = col[i];
        }
    }
    Some(inv)
}

/// Core damped least-squares loop. Constants: initial damping 1e-3,
/// decrease x0.3 on an accepted step, increase x10 on a rejected one
/// (bounds 1e-12..1e12); convergence on max relative step < 1e-10.
/// Proposals failing `valid` or producing non-finite residuals are
/// rejected like uphill steps.
fn lm_fit<F, V>(
    xs: &[f64],
    ys: &[f64],
    init: &[f64],
    eval: F,
    valid: V,
    max_iterations: usize,
) -> LmOutcome
where
    F: Fn(f64, &[f64], &mut [f64]) -> f64,
    V: Fn(&[f64]) -> bool,
{
    let n_params = init.len();
    let mut params = init.to_vec();
    let mut grad_buf = vec![0.0; n_params];

    let rss_of = |p: &[f64], eval: &F| -> f64 {
        let mut g = vec![0.0; n_params];
        xs.iter()
            .zip(ys)
            .map(|(&x, &y)| {
                let r = y - eval(x, p, &mut g);
                r * r
            })
            .sum()
    };

    let mut rss = rss_of(&params, &eval);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..max_iterations {
        iterations = iter + 1;
        // Normal equations JtJ and Jtr at the current point.
        let mut jtj = vec![vec![0.0; n_params]; n_params];
        let mut jtr = vec![0.0; n_params];
        for (&x, &y) in xs.iter().zip(ys) {
            let value = eval(x, &params, &mut grad_buf);
            let r = y - value;
            for i in 0..n_params {
                jtr[i] += grad_buf[i] * r;
                for j in i..n_params {
                    jtj[i][j] += grad_buf[i] * grad_buf[j];
                }
            }
        }
        for i in 0..n_params {
            for j in 0..i {
                jtj[i][j] = jtj[j][i];
            }
        }

        let mut accepted = false;
        while lambda <= 1e12 {
            let mut damped = jtj.clone();
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-300);
            }
            if let Some(step) = solve_linear(damped, jtr.clone()) {
                let proposal: Vec<f64> =
                    params.iter().zip(&step).map(|(p, s)| p + s).collect();
                if valid(&proposal) {
                    let new_rss = rss_of(&proposal, &eval);
                    if new_rss.is_finite() && new_rss <= rss {
                        let max_rel_step = params
                            .iter()
                            .zip(&step)
                            .map(|(p, s)| (s / (p.abs() + 1e-12)).abs())
                            .fold(0.0, f64::max);
                        params = proposal;
                        rss = new_rss;
                        lambda = (lambda * 0.3).max(1e-12);
                        accepted = true;
                        if max_rel_step < 1e-10 {
                            converged = true;
                        }
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        if converged || !accepted {
            break;
        }
    }

    // Covariance from the quadratic model at the optimum, scaled by the
    // residual variance for unweighted data.
    let mut jtj = vec![vec![0.0; n_params]; n_params];
    for &x in xs {
        eval(x, &params, &mut grad_buf);
        for i in 0..n_params {
            for j in i..n_params {
                jtj[i][j] += grad_buf[i] * grad_buf[j];
            }
        }
    }
    for i in 0..n_params {
        for j in 0..i {
            jtj[i][j] = jtj[j][i];
        }
    }
    let dof = (xs.len().saturating_sub(n_params)).max(1) as f64;
    let scale = rss / dof;
    let (sigmas, singular_covariance) = match invert(&jtj) {
        Some(inv) => (
            (0..n_params).map(|i| (inv[i][i] * scale).max(0.0).sqrt()).collect(),
            false,
        ),
        None => (vec![f64::NAN; n_params], true),
    };

    LmOutcome { params, sigmas, rss, converged, iterations, singular_covariance }
}

fn common_checks(samples: &[(f64, f64)], needed: usize) -> Result<(), FitError> {
    if samples.len() < needed {
        return Err(FitError::TooFewSamples { needed, got: samples.len() });
    }
    let ymin = samples.iter().map(|&(_, y)| y).fold(f64::INFINITY, f64::min);
    let ymax = samples.iter().map(|&(_, y)| y).fold(f64::NEG_INFINITY, f64::max);
    if !(ymax - ymin).is_finite() || ymax - ymin == 0.0 {
        return Err(FitError::DegenerateData("zero variance in sample values".into()));
    }
    let xmin = samples.iter().map(|&(x, _)| x).fold(f64::INFINITY, f64::min);
    let xmax = samples.iter().map(|&(x, _)| x).fold(f64::NEG_INFINITY, f64::max);
    if !(xmax - xmin).is_finite() || xmax - xmin == 0.0 {
        return Err(FitError::DegenerateData("zero variance in sample positions".into()));
    }
    Ok(())
}

/// Lorentzian line value and analytic gradient; p = [center, fwhm, peak,
/// offset], grad holds the four partials on return. This is the model
/// `fit_lorentzian` optimizes; callers can use it to render fitted curves.
pub fn lorentzian_eval(x: f64, p: &[f64], grad: &mut [f64]) -> f64 {
    let (center, fwhm, peak, offset) = (p[0], p[1], p[2], p[3]);
    let u = 2.0 * (x - center) / fwhm;
    let denom = 1.0 + u * u;
    let shape = 1.0 / denom;
    grad[0] = 4.0 * peak * u / (fwhm * denom * denom);
    grad[1] = 2.0 * peak * u * u / (fwhm * denom * denom);
    grad[2] = shape;
    grad[3] = 1.0;
    offset + peak * shape
}

fn lorentzian_init(sorted: &[(f64, f64)]) -> [f64; 4] {
    let offset = sorted.iter().map(|&(_, y)| y).fold(f64::INFINITY, f64::min);
    let (mut center, mut ymax) = (sorted[0].0, f64::NEG_INFINITY);
    let mut imax = 0;
    for (i, &(x, y)) in sorted.iter().enumerate() {
        if y > ymax {
            ymax = y;
            center = x;
            imax = i;
        }
    }
    let peak = ymax - offset;
    let half = offset + 0.5 * peak;
    let span = sorted.last().unwrap().0 - sorted[0].0;
    let left = sorted[..imax].iter().rev().find(|&&(_, y)| y < half).map(|&(x, _)| x);
    let right = sorted[imax..].iter().find(|&&(_, y)| y < half).map(|&(x, _)| x);
    let fwhm = match (left, right) {
        (Some(l), Some(r)) => r - l,
        (Some(l), None) => 2.0 * (center - l),
        (None, Some(r)) => 2.0 * (r - center),
        (None, None) => span / 4.0,
    };
    [center, fwhm.max(span / (sorted.len() as f64)), peak, offset]
}

/// Fit a Lorentzian line `offset + peak / (1 + (2(x-center)/fwhm)^2)` to
/// (position, amplitude) samples.
pub fn fit_lorentzian(samples: &[(f64, f64)]) -> Result<FitResult, FitError> {
    common_checks(samples, 8)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite sample positions"));
    let xs: Vec<f64> = sorted.iter().map(|&(x, _)| x).collect();
    let ys: Vec<f64> = sorted.iter().map(|&(_, y)| y).collect();
    let init = lorentzian_init(&sorted);

    let outcome = lm_fit(
        &xs,
        &ys,
        &init,
        lorentzian_eval,
        |p| p[1] > 0.0, // fwhm stays positive; the model is even in it
        200,
    );
    let mut warnings = Vec::new();
    if !outcome.converged {
        warnings.push("no convergence within 200 iterations; parameters are best-effort".into());
    }
    if outcome.singular_covariance {
        warnings.push("singular covariance; uncertainties unavailable".into());
    }
    let span = xs.last().unwrap() - xs[0];
    if span < 2.0 * outcome.params[1] {
        warnings.push(format!(
            "samples span {span:.3} but the fitted line is {:.3} wide; \
             coverage below two linewidths",
            outcome.params[1]
        ));
    }
    let names = ["center", "fwhm", "peak", "offset"];
    Ok(FitResult {
        parameters: names
            .iter()
            .zip(outcome.params.iter().zip(&outcome.sigmas))
            .map(|(&name, (&value, &sigma))| FittedParam { name, value, sigma })
            .collect(),
        residual_sum: outcome.rss,
        converged: outcome.converged,
        iterations: outcome.iterations,
        warnings,
    })
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Exponentially modified Gaussian value and analytic gradient in
/// p = [t0, lifetime, amplitude, fwhm]; the width is passed separately as
/// `fwhm` so a fixed-response fit can keep it out of p. `n_free` limits
/// which entries of `grad` are written (3 when the width is fixed). This
/// is the model `fit_exp_gauss` optimizes.
pub fn emg_eval(t: f64, p: &[f64], grad: &mut [f64], fwhm: f64, n_free: usize) -> f64 {
    let (t0, lifetime, amplitude) = (p[0], p[1], p[2]);
    let lambda = 1.0 / lifetime;
    let sigma = numeric::sigma_from_fwhm(fwhm);
    let z = (t - t0) / sigma;
    let q = lambda * sigma - z;
    let p_term = numeric::exp_gauss_product(z, q);
    let g = 0.5 * lambda * p_term;
    // dP/dq = q P - sqrt(2/pi) exp(-z^2/2)
    let gauss = (-0.5 * z * z).exp();
    let dp_dq = 0.5 * lambda * (q * p_term - SQRT_2_OVER_PI * gauss);
    let dg_dt0 = (z * g + dp_dq) / sigma;
    let dg_dlambda = g / lambda + dp_dq * sigma;
    grad[0] = amplitude * dg_dt0;
    grad[1] = -amplitude * lambda * lambda * dg_dlambda;
    grad[2] = g;
    if n_free > 3 {
        let dg_dsigma = z * z * g / sigma + dp_dq * (lambda + z / sigma);
        grad[3] = amplitude * dg_dsigma / (8.0 * std::f64::consts::LN_2).sqrt();
    }
    amplitude * g
}

fn emg_init(sorted: &[(f64, f64)], fixed_fwhm: Option<f64>) -> [f64; 4] {
    let total: f64 = sorted.iter().map(|&(_, y)| y).sum();
    let mean = sorted.iter().map(|&(x, y)| x * y).sum::<f64>() / total;
    let var = sorted.iter().map(|&(x, y)| (x - mean).powi(2) * y).sum::<f64>() / total;
    let m3 = sorted.iter().map(|&(x, y)| (x - mean).powi(3) * y).sum::<f64>() / total;
    // EMG moments: mean = t0 + tau, var = sigma^2 + tau^2, m3 = 2 tau^3.
    let tau = (0.5 * m3).max(1e-12).cbrt();
    let sigma2 = (var - tau * tau).max(1e-6 * var.abs().max(1e-12));
    let fwhm = fixed_fwhm
        .unwrap_or_else(|| sigma2.sqrt() * (8.0 * std::f64::consts::LN_2).sqrt());
    let spacing = (sorted.last().unwrap().0 - sorted[0].0) / (sorted.len() - 1) as f64;
    [mean - tau, tau, total * spacing, fwhm]
}

/// Fit a one-sided exponential decay convolved with a Gaussian detector
/// response to (time, counts) samples. The convolution is evaluated in
/// scaled-complementary-error-function form, stable for narrow responses.
pub fn fit_exp_gauss(
    samples: &[(f64, f64)],
    detector: DetectorResponse,
) -> Result<FitResult, FitError> {
    common_checks(samples, 8)?;
    if let DetectorResponse::Known(w) = detector {
        if !(w > 0.0) {
            return Err(FitError::InvalidDetectorWidth(w));
        }
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite sample positions"));
    let xs: Vec<f64> = sorted.iter().map(|&(x, _)| x).collect();
    let ys: Vec<f64> = sorted.iter().map(|&(_, y)| y).collect();

    let fixed = match detector {
        DetectorResponse::Known(w) => Some(w),
        DetectorResponse::Free => None,
    };
    let init_full = emg_init(&sorted, fixed);
    let n_free = if fixed.is_some() { 3 } else { 4 };
    let init = &init_full[..n_free];

    let outcome = lm_fit(
        &xs,
        &ys,
        init,
        |t, p, grad| {
            let fwhm = fixed.unwrap_or_else(|| p[3]);
            emg_eval(t, p, grad, fwhm, n_free)
        },
        |p| p[1] > 0.0 && (fixed.is_some() || p[3] > 0.0),
        200,
    );

    let mut warnings = Vec::new();
    if !outcome.converged {
        warnings.push("no convergence within 200 iterations; parameters are best-effort".into());
    }
    if outcome.singular_covariance {
        warnings.push("singular covariance; uncertainties unavailable".into());
    }
    let lifetime = outcome.params[1];
    if fixed.is_none() && outcome.params[3] > 2.0 * lifetime {
        warnings.push(format!(
            "detector width {:.3} ns exceeds twice the lifetime {:.3} ns; the two are \
             weakly identifiable, consider fixing the width",
            outcome.params[3], lifetime
        ));
    }
    let span = xs.last().unwrap() - xs[0];
    if span < 3.0 * lifetime {
        warnings.push(format!(
            "samples span {span:.3} ns, below three lifetimes ({:.3} ns each)",
            lifetime
        ));
    }

    let names = ["t0", "lifetime", "amplitude", "detector_fwhm"];
    Ok(FitResult {
        parameters: names[..n_free]
            .iter()
            .zip(outcome.params.iter().zip(&outcome.sigmas))
            .map(|(&name, (&value, &sigma))| FittedParam { name, value, sigma })
            .collect(),
        residual_sum: outcome.rss,
        converged: outcome.converged,
        iterations: outcome.iterations,
        warnings,
    })
}
