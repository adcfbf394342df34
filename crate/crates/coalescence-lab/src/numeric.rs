//! Scalar special functions, quadrature, and root finding shared by the
//! analytic model and the fitters.

use std::f64::consts::PI;

/// Scaled complementary error function, `exp(x^2) * erfc(x)`.
///
/// Stable over the whole real line: the direct product is safe for
/// 0 <= x <= 25 (both factors representable), an asymptotic series takes
/// over beyond, and negative arguments use the reflection
/// `erfcx(-x) = 2 exp(x^2) - erfcx(x)` (overflowing to +inf only where the
/// true value exceeds f64 range, around x < -26.6).
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x <= 25.0 {
        (x * x).exp() * libm::erfc(x)
    } else {
        // 1/(x sqrt(pi)) * sum (-1)^k (2k-1)!! / (2x^2)^k, truncation error
        // below 3e-15 relative for x > 25.
        let ix2 = 1.0 / (x * x);
        let series = 1.0
            + ix2 * (-0.5 + ix2 * (0.75 + ix2 * (-1.875 + ix2 * (6.5625 + ix2 * -29.53125))));
        series / (x * PI.sqrt())
    }
}

/// `exp(-z^2/2) * erfcx(q / sqrt(2))` without overflow for q << 0.
///
/// This product is the building block of every exponential-times-Gaussian
/// convolution here. For negative q the reflection would overflow, so the
/// exponents are combined first; `(q-z)(q+z)` avoids the cancellation that
/// `q^2 - z^2` would suffer for large arguments.
pub fn exp_gauss_product(z: f64, q: f64) -> f64 {
    if q >= 0.0 {
        (-0.5 * z * z).exp() * erfcx(q / std::f64::consts::SQRT_2)
    } else {
        2.0 * (0.5 * (q - z) * (q + z)).exp()
            - (-0.5 * z * z).exp() * erfcx(-q / std::f64::consts::SQRT_2)
    }
}

/// Gaussian sigma for a given full width at half maximum.
pub fn sigma_from_fwhm(fwhm: f64) -> f64 {
    fwhm / (8.0 * std::f64::consts::LN_2).sqrt()
}

/// Normalized Gaussian density.
pub fn gaussian_density(x: f64, sigma: f64) -> f64 {
    let z = x / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

/// One-sided exponential density `lambda exp(-lambda u)` (u >= 0) convolved
/// with a centered Gaussian of width `sigma`; the exponentially modified
/// Gaussian. `sigma = 0` returns the bare density.
pub fn exp_one_sided_conv_gauss(lambda: f64, sigma: f64, u: f64) -> f64 {
    if sigma == 0.0 {
        return if u >= 0.0 { lambda * (-lambda * u).exp() } else { 0.0 };
    }
    let z = u / sigma;
    0.5 * lambda * exp_gauss_product(z, lambda * sigma - z)
}

/// Two-sided kernel `exp(-lambda |tau|)` convolved with a centered Gaussian
/// of width `sigma`. Even in tau; `sigma = 0` returns the bare kernel.
pub fn exp_abs_conv_gauss(lambda: f64, sigma: f64, tau: f64) -> f64 {
    let t = tau.abs();
    if sigma == 0.0 {
        return (-lambda * t).exp();
    }
    let z = t / sigma;
    0.5 * (exp_gauss_product(z, lambda * sigma - z) + exp_gauss_product(z, lambda * sigma + z))
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    adaptive(&f, a, b, fa, fm, fb, simpson(a, b, fa, fm, fb), tol, 50)
}

/// Adaptive Simpson over a domain split at interior breakpoints (integrand
/// kinks); out-of-range breakpoints are ignored.
pub fn integrate_split<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    tol: f64,
) -> f64 {
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    cuts.dedup();
    let mut lo = a;
    let mut total = 0.0;
    let n = cuts.len() + 1;
    for &c in cuts.iter().chain(std::iter::once(&b)) {
        total += integrate(&f, lo, c, tol / n as f64);
        lo = c;
    }
    total
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        adaptive(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + adaptive(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RootError {
    #[error("no sign change on [{lo}, {hi}]: f(lo) = {f_lo:e}, f(hi) = {f_hi:e}")]
    NoSignChange { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
}

/// Bisection root finder; requires a sign change across `[lo, hi]` and
/// returns the bracket midpoint once the bracket is narrower than `xtol`.
pub fn find_root<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, xtol: f64) -> Result<f64, RootError> {
    let (mut lo, mut hi) = (lo, hi);
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(RootError::NoSignChange { lo, hi, f_lo, f_hi });
    }
    while hi - lo > xtol {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
