//! Analytic two-photon coincidence model at a balanced beam splitter:
//! joint detection densities, detector-response convolution, multi-photon
//! background, and the coalescence metrics (overall, zero-delay, gated).

use crate::numeric;
use crate::wavepacket::{PacketShape, WavepacketSpec};
use serde::Serialize;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    Parallel,
    Perpendicular,
}

/// Temporal allocation of the multi-photon admixture. The admixture weight
/// is fixed by `epsilon`; only its distribution over tau is a choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundShape {
    /// Emitter-emitter accidental shape, `(Gamma/2) exp(-Gamma |tau|)`.
    QdOverlap,
    /// Uniform over the trial period.
    FlatWithinPeak,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("multi-photon weight epsilon must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error("detector FWHM must be non-negative, got {0} ns")]
    NegativeDetectorFwhm(f64),
    #[error("trial period must be positive, got {0} ns")]
    NonPositivePeriod(f64),
    #[error("gate window must be positive, got {0} ns")]
    NonPositiveWindow(f64),
    #[error(
        "zero-delay target {target} is outside the reachable range [{lo}, {hi}] \
         for detector FWHM in [0, 2] ns"
    )]
    CalibrationTargetUnreachable { target: f64, lo: f64, hi: f64 },
}

/// Two-source coincidence model. `detector_fwhm` is the Gaussian timing
/// response per detector; the tau axis sees the combined width sqrt(2) times
/// that. `epsilon` is the relative area of admixture coincidences.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoincidenceModel {
    pub wp_qd: WavepacketSpec,
    pub wp_pdc: WavepacketSpec,
    pub epsilon: f64,
    pub detector_fwhm: f64,
    pub background_shape: BackgroundShape,
    pub detuning_ghz: f64,
    pub period_ns: f64,
}

/// Area-level coalescence numbers; areas include the admixture background.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoalescenceMetrics {
    pub p_c: f64,
    pub area_perp: f64,
    pub area_par: f64,
}

/// Gated-ensemble metrics: the coalescence fraction within the window and
/// the fraction of coincidences retained.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GatedMetrics {
    pub p_c_fraction: f64,
    pub retention: f64,
}

/// One row of the exported correlation curves: perpendicular and parallel
/// densities with the detector response, and the ideal-detector parallel
/// density.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurveSample {
    pub tau_ns: f64,
    pub c_perp: f64,
    pub c_par: f64,
    pub c_par_ideal: f64,
}

// Quadrature tolerances chosen so every closed form is reproducible to
// better than 1e-6 relative by the fallback paths.
const CURVE_TOL: f64 = 1e-10;
const AREA_OUTER_TOL: f64 = 1e-9;
const AREA_INNER_TOL: f64 = 1e-11;

impl CoincidenceModel {
    pub fn new(
        wp_qd: WavepacketSpec,
        wp_pdc: WavepacketSpec,
        epsilon: f64,
        detector_fwhm: f64,
        background_shape: BackgroundShape,
        detuning_ghz: f64,
        period_ns: f64,
    ) -> Result<Self, ModelError> {
        if !(epsilon >= 0.0) {
            return Err(ModelError::NegativeEpsilon(epsilon));
        }
        if !(detector_fwhm >= 0.0) {
            return Err(ModelError::NegativeDetectorFwhm(detector_fwhm));
        }
        if !(period_ns > 0.0) {
            return Err(ModelError::NonPositivePeriod(period_ns));
        }
        Ok(Self {
            wp_qd,
            wp_pdc,
            epsilon,
            detector_fwhm,
            background_shape,
            detuning_ghz,
            period_ns,
        })
    }

    /// Sum of the two sources' pure-dephasing rates, the decay rate of the
    /// interference term in |t1 - t2|.
    pub fn gamma_sum(&self) -> f64 {
        self.wp_qd.dephasing_rate + self.wp_pdc.dephasing_rate
    }

    /// Combined two-detector Gaussian sigma on the tau axis.
    fn sigma_combined(&self) -> f64 {
        numeric::sigma_from_fwhm(self.detector_fwhm) * std::f64::consts::SQRT_2
    }

    fn omega(&self) -> f64 {
        2.0 * PI * self.detuning_ghz
    }

    /// Closed forms cover the aligned one-sided case; anything else goes
    /// through quadrature.
    fn closed_form_signal(&self) -> bool {
        self.wp_qd.shape == PacketShape::OneSided
            && self.wp_pdc.shape == PacketShape::OneSided
            && self.wp_qd.origin == self.wp_pdc.origin
    }

    /// Joint detection density at the two output ports, before detector
    /// response and without the admixture background. Non-negative by the
    /// arithmetic-geometric mean bound on the interference term.
    pub fn joint_density(&self, t1: f64, t2: f64, pol: Polarization) -> f64 {
        let p11 = self.wp_qd.density(t1);
        let p22 = self.wp_pdc.density(t2);
        let p12 = self.wp_qd.density(t2);
        let p21 = self.wp_pdc.density(t1);
        let perp = 0.25 * (p11 * p22 + p12 * p21);
        match pol {
            Polarization::Perpendicular => perp,
            Polarization::Parallel => {
                let xi = self.wp_qd.amplitude(t1)
                    * self.wp_pdc.amplitude(t1)
                    * self.wp_qd.amplitude(t2)
                    * self.wp_pdc.amplitude(t2);
                let dt = t1 - t2;
                let coherence = (-self.gamma_sum() * dt.abs()).exp() * (self.omega() * dt).cos();
                perp - 0.5 * xi * coherence
            }
        }
    }

    /// Decay rates (a_qd, a_pdc, mean, interference decay a_mean+gamma_sum).
    fn rates(&self) -> (f64, f64, f64, f64) {
        let a1 = self.wp_qd.decay_rate;
        let a2 = self.wp_pdc.decay_rate;
        let abar = 0.5 * (a1 + a2);
        (a1, a2, abar, abar + self.gamma_sum())
    }

    fn signal_raw(&self, tau: f64, pol: Polarization) -> f64 {
        if self.closed_form_signal() {
            let (a1, a2, abar, b) = self.rates();
            let q = a1 * a2 / (4.0 * (a1 + a2));
            let perp = q * ((-a1 * tau.abs()).exp() + (-a2 * tau.abs()).exp());
            match pol {
                Polarization::Perpendicular => perp,
                Polarization::Parallel => {
                    let d = a1 * a2 / (4.0 * abar);
                    perp - d * (-b * tau.abs()).exp() * (self.omega() * tau).cos()
                }
            }
        } else {
            self.signal_raw_quad(tau, pol)
        }
    }

    fn signal_raw_quad(&self, tau: f64, pol: Polarization) -> f64 {
        let margin = 80.0;
        let lo1 = self.wp_qd.support_start();
        let hi1 = self.wp_qd.origin + margin / self.wp_qd.decay_rate;
        let lo2 = self.wp_pdc.support_start() - tau;
        let hi2 = self.wp_pdc.origin + margin / self.wp_pdc.decay_rate - tau;
        // The symmetrized density also pairs (pdc at t, qd at t + tau).
        let lo = lo1.min(self.wp_pdc.support_start()).min(lo2).min(lo1 - tau.abs());
        let hi = hi1.max(hi2).max(hi1 - tau).max(hi2 + tau.abs());
        let kinks = [
            self.wp_qd.origin,
            self.wp_pdc.origin,
            self.wp_qd.origin - tau,
            self.wp_pdc.origin - tau,
        ];
        numeric::integrate_split(
            |t| self.joint_density(t, t + tau, pol),
            lo,
            hi,
            &kinks,
            CURVE_TOL,
        )
    }

    /// Source-pair coincidence density on the tau axis with the detector
    /// response applied, excluding the admixture background.
    pub fn signal_correlation(&self, tau: f64, pol: Polarization) -> f64 {
        let sigma = self.sigma_combined();
        if sigma == 0.0 {
            return self.signal_raw(tau, pol);
        }
        if self.closed_form_signal() && self.detuning_ghz == 0.0 {
            let (a1, a2, abar, b) = self.rates();
            let q = a1 * a2 / (4.0 * (a1 + a2));
            let perp = q
                * (numeric::exp_abs_conv_gauss(a1, sigma, tau)
                    + numeric::exp_abs_conv_gauss(a2, sigma, tau));
            match pol {
                Polarization::Perpendicular => perp,
                Polarization::Parallel => {
                    let d = a1 * a2 / (4.0 * abar);
                    perp - d * numeric::exp_abs_conv_gauss(b, sigma, tau)
                }
            }
        } else {
            let span = 8.5 * sigma;
            numeric::integrate_split(
                |s| self.signal_raw(tau - s, pol) * numeric::gaussian_density(s, sigma),
                -span,
                span,
                &[tau, tau - (self.wp_pdc.origin - self.wp_qd.origin)],
                CURVE_TOL,
            )
        }
    }

    /// Admixture coincidence density before detector response:
    /// `B(tau) = epsilon * A_perp * shape(tau)` with unit-area shape, so the
    /// background integrates to `epsilon/2` regardless of shape. Identical
    /// in both polarizations.
    pub fn multiphoton_background(&self, tau: f64) -> f64 {
        let signal_area = 0.5;
        match self.background_shape {
            BackgroundShape::QdOverlap => {
                let g = self.wp_qd.decay_rate;
                self.epsilon * signal_area * 0.5 * g * (-g * tau.abs()).exp()
            }
            BackgroundShape::FlatWithinPeak => {
                if tau.abs() <= 0.5 * self.period_ns {
                    self.epsilon * signal_area / self.period_ns
                } else {
                    0.0
                }
            }
        }
    }

    fn background_convolved(&self, tau: f64) -> f64 {
        let sigma = self.sigma_combined();
        if sigma == 0.0 {
            return self.multiphoton_background(tau);
        }
        let signal_area = 0.5;
        match self.background_shape {
            BackgroundShape::QdOverlap => {
                let g = self.wp_qd.decay_rate;
                self.epsilon * signal_area * 0.5 * g * numeric::exp_abs_conv_gauss(g, sigma, tau)
            }
            BackgroundShape::FlatWithinPeak => {
                let half = 0.5 * self.period_ns;
                let s = sigma * std::f64::consts::SQRT_2;
                self.epsilon * signal_area / self.period_ns
                    * 0.5
                    * (libm::erf((half - tau) / s) + libm::erf((half + tau) / s))
            }
        }
    }

    /// Measured coincidence density: source pairs plus admixture, detector
    /// response applied to both.
    pub fn cross_correlation_density(&self, tau: f64, pol: Polarization) -> f64 {
        self.signal_correlation(tau, pol) + self.background_convolved(tau)
    }

    /// Interference deficit area, `integral of (C_perp - C_par) d tau`.
    fn deficit_area(&self) -> f64 {
        if self.closed_form_signal() {
            let (a1, a2, abar, b) = self.rates();
            let d = a1 * a2 / (4.0 * abar);
            let w = self.omega();
            d * 2.0 * b / (b * b + w * w)
        } else {
            let gs = self.gamma_sum();
            let w = self.omega();
            let f1 = |t: f64| self.wp_qd.amplitude(t) * self.wp_pdc.amplitude(t);
            let lo = self.wp_qd.support_start().min(self.wp_pdc.support_start());
            let hi = self.wp_qd.origin + 80.0 / self.wp_qd.decay_rate.min(self.wp_pdc.decay_rate);
            let kinks = [self.wp_qd.origin, self.wp_pdc.origin];
            let outer = |t1: f64| {
                let amp1 = f1(t1);
                if amp1 == 0.0 {
                    return 0.0;
                }
                amp1 * numeric::integrate_split(
                    |t2| {
                        let dt = t1 - t2;
                        f1(t2) * (-gs * dt.abs()).exp() * (w * dt).cos()
                    },
                    lo,
                    hi,
                    &[t1, kinks[0], kinks[1]],
                    AREA_INNER_TOL,
                )
            };
            0.5 * numeric::integrate_split(outer, lo, hi, &kinks, AREA_OUTER_TOL)
        }
    }

    /// Total measured peak areas and the coalescence probability
    /// `P_c = (A_perp - A_par)/A_perp`. Detector convolution preserves
    /// areas, so the result is jitter-independent.
    pub fn coalescence_metrics(&self) -> CoalescenceMetrics {
        // Each wavepacket is normalized, so the perpendicular source-pair
        // area is exactly 1/2; the admixture adds epsilon times that.
        let area_perp = 0.5 * (1.0 + self.epsilon);
        let area_par = area_perp - self.deficit_area();
        CoalescenceMetrics { p_c: (area_perp - area_par) / area_perp, area_perp, area_par }
    }

    pub fn coalescence_probability(&self) -> f64 {
        self.coalescence_metrics().p_c
    }

    /// Zero-delay (post-selective) coalescence probability on the measured,
    /// detector-convolved densities.
    pub fn coalescence_zero(&self) -> f64 {
        let perp = self.cross_correlation_density(0.0, Polarization::Perpendicular);
        let par = self.cross_correlation_density(0.0, Polarization::Parallel);
        (perp - par) / perp
    }

    /// Coalescence within an emission-time gate `[0, w]` on both photons.
    ///
    /// The admixture is assumed to share the signal pairs' gate acceptance,
    /// so its relative weight inside any window stays `epsilon`; under that
    /// assumption `retention = A_perp(w)/A_perp` reduces to the product of
    /// the two single-photon acceptances. As `w` grows the pair recovers
    /// the ungated `(P_c, 1)`.
    pub fn gated_coalescence(&self, window: f64) -> Result<GatedMetrics, ModelError> {
        if !(window > 0.0) {
            return Err(ModelError::NonPositiveWindow(window));
        }
        let (a1, a2, abar, b) = self.rates();
        let use_closed = self.closed_form_signal()
            && self.wp_qd.origin == 0.0
            && self.detuning_ghz == 0.0
            && (self.gamma_sum() - abar).abs() > 1e-9 * b;
        let (signal_perp_gated, deficit_gated) = if use_closed {
            let p1 = 1.0 - (-a1 * window).exp();
            let p2 = 1.0 - (-a2 * window).exp();
            let gs = self.gamma_sum();
            let integral = 2.0 / (gs - abar)
                * ((1.0 - (-2.0 * abar * window).exp()) / (2.0 * abar)
                    - (1.0 - (-b * window).exp()) / b);
            (0.5 * p1 * p2, 0.5 * a1 * a2 * integral)
        } else {
            let perp = self.window_pair_integral(window, Polarization::Perpendicular);
            let par = self.window_pair_integral(window, Polarization::Parallel);
            (perp, perp - par)
        };
        let area_perp_gated = signal_perp_gated * (1.0 + self.epsilon);
        let retention = area_perp_gated / (0.5 * (1.0 + self.epsilon));
        Ok(GatedMetrics { p_c_fraction: deficit_gated / area_perp_gated, retention })
    }

    fn window_pair_integral(&self, window: f64, pol: Polarization) -> f64 {
        let kinks = [self.wp_qd.origin, self.wp_pdc.origin];
        let outer = |t1: f64| {
            numeric::integrate_split(
                |t2| self.joint_density(t1, t2, pol),
                0.0,
                window,
                &[t1, kinks[0], kinks[1]],
                AREA_INNER_TOL,
            )
        };
        numeric::integrate_split(outer, 0.0, window, &kinks, AREA_OUTER_TOL)
    }

    fn coalescence_zero_at(&self, fwhm: f64) -> f64 {
        let mut probe = *self;
        probe.detector_fwhm = fwhm;
        probe.coalescence_zero()
    }

    /// Find the detector FWHM in [0, 2] ns reproducing a measured zero-delay
    /// coalescence. The zero-delay value decreases monotonically with
    /// jitter, so the root is unique when it exists.
    pub fn calibrate_detector(&self, target: f64) -> Result<f64, ModelError> {
        let hi_val = self.coalescence_zero_at(0.0);
        let lo_val = self.coalescence_zero_at(2.0);
        if !(target <= hi_val && target >= lo_val) {
            return Err(ModelError::CalibrationTargetUnreachable {
                target,
                lo: lo_val,
                hi: hi_val,
            });
        }
        let root = numeric::find_root(
            |fwhm| self.coalescence_zero_at(fwhm) - target,
            0.0,
            2.0,
            1e-5,
        )
        .expect("monotone bracket verified above");
        Ok(root)
    }

    /// Evenly sampled correlation curves for export: measured perpendicular
    /// and parallel densities, plus the ideal-detector parallel density.
    pub fn correlation_curves(&self, tau_max: f64, n: usize) -> Vec<CurveSample> {
        let mut ideal = *self;
        ideal.detector_fwhm = 0.0;
        (0..n)
            .map(|i| {
                let tau = -tau_max + 2.0 * tau_max * i as f64 / (n - 1) as f64;
                CurveSample {
                    tau_ns: tau,
                    c_perp: self.cross_correlation_density(tau, Polarization::Perpendicular),
                    c_par: self.cross_correlation_density(tau, Polarization::Parallel),
                    c_par_ideal: ideal.cross_correlation_density(tau, Polarization::Parallel),
                }
            })
            .collect()
    }
}
