//! Photon temporal and spectral modes: the emitter wavepacket with pure
//! dephasing, the filtered heralded-source wavepacket, and the etalon
//! transmission function.
//!
//! Units are fixed throughout: times in ns, rates in ns^-1, frequencies in
//! GHz (1 GHz of angular bandwidth = 2*pi ns^-1).

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use std::f64::consts::PI;

/// Temporal envelope family of a wavepacket.
///
/// `OneSided` is the default decaying exponential starting at the origin.
/// `TwoSided` is the symmetric alternative for the filtered source, kept as
/// a sensitivity option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketShape {
    OneSided,
    TwoSided,
}

/// Single-photon wavepacket: intensity profile, pure-dephasing rate, and
/// emission-time origin.
///
/// For `OneSided`, `decay_rate` is the intensity decay `a` in
/// `|xi(t)|^2 = a exp(-a (t - t0))` for `t >= t0`. For `TwoSided` it is the
/// amplitude rate `s` in `|xi(t)|^2 = s exp(-2 s |t - t0|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WavepacketSpec {
    pub decay_rate: f64,
    pub dephasing_rate: f64,
    pub origin: f64,
    pub shape: PacketShape,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WavepacketError {
    #[error("lifetime must be positive, got {0} ns")]
    NonPositiveLifetime(f64),
    #[error("coherence time must be positive, got {0} ns")]
    NonPositiveCoherence(f64),
    #[error("coherence time {t2} ns exceeds the lifetime limit 2*T1 = {limit} ns")]
    CoherenceBeyondLifetimeLimit { t2: f64, limit: f64 },
    #[error("filter width must be positive, got {0} GHz")]
    NonPositiveFilterWidth(f64),
    #[error("dephasing is only supported for one-sided packets")]
    DephasedTwoSided,
}

/// Emitter wavepacket from measured lifetime and coherence time:
/// `a = 1/T1`, `gamma_d = 1/T2 - 1/(2 T1)`.
pub fn qd_wavepacket(t1: f64, t2: f64) -> Result<WavepacketSpec, WavepacketError> {
    if t1 <= 0.0 {
        return Err(WavepacketError::NonPositiveLifetime(t1));
    }
    if t2 <= 0.0 {
        return Err(WavepacketError::NonPositiveCoherence(t2));
    }
    if t2 > 2.0 * t1 {
        return Err(WavepacketError::CoherenceBeyondLifetimeLimit { t2, limit: 2.0 * t1 });
    }
    Ok(WavepacketSpec {
        decay_rate: 1.0 / t1,
        dephasing_rate: 1.0 / t2 - 0.5 / t1,
        origin: 0.0,
        shape: PacketShape::OneSided,
    })
}

/// Heralded-source wavepacket behind a Lorentzian filter of the given FWHM:
/// decoherence-free one-sided exponential with `a = 2 pi fwhm`.
pub fn pdc_wavepacket(filter_fwhm_ghz: f64) -> Result<WavepacketSpec, WavepacketError> {
    if filter_fwhm_ghz <= 0.0 {
        return Err(WavepacketError::NonPositiveFilterWidth(filter_fwhm_ghz));
    }
    Ok(WavepacketSpec {
        decay_rate: 2.0 * PI * filter_fwhm_ghz,
        dephasing_rate: 0.0,
        origin: 0.0,
        shape: PacketShape::OneSided,
    })
}

/// Symmetric-exponential variant of the filtered wavepacket with the same
/// spectral FWHM, for shape-sensitivity checks.
pub fn pdc_wavepacket_two_sided(filter_fwhm_ghz: f64) -> Result<WavepacketSpec, WavepacketError> {
    if filter_fwhm_ghz <= 0.0 {
        return Err(WavepacketError::NonPositiveFilterWidth(filter_fwhm_ghz));
    }
    // Intensity spectrum of exp(-s|t|) is 1/(s^2+w^2)^2 with half width
    // s sqrt(sqrt(2)-1) in angular units.
    let s = PI * filter_fwhm_ghz / (std::f64::consts::SQRT_2 - 1.0).sqrt();
    Ok(WavepacketSpec {
        decay_rate: s,
        dephasing_rate: 0.0,
        origin: 0.0,
        shape: PacketShape::TwoSided,
    })
}

impl WavepacketSpec {
    pub fn with_origin(mut self, t0: f64) -> Self {
        self.origin = t0;
        self
    }

    /// Real temporal amplitude `xi(t)`; `|xi|^2` integrates to 1.
    pub fn amplitude(&self, t: f64) -> f64 {
        let u = t - self.origin;
        match self.shape {
            PacketShape::OneSided => {
                if u < 0.0 {
                    0.0
                } else {
                    self.decay_rate.sqrt() * (-0.5 * self.decay_rate * u).exp()
                }
            }
            PacketShape::TwoSided => {
                self.decay_rate.sqrt() * (-self.decay_rate * u.abs()).exp()
            }
        }
    }

    /// Intensity profile `|xi(t)|^2`.
    pub fn density(&self, t: f64) -> f64 {
        let u = t - self.origin;
        match self.shape {
            PacketShape::OneSided => {
                if u < 0.0 {
                    0.0
                } else {
                    self.decay_rate * (-self.decay_rate * u).exp()
                }
            }
            PacketShape::TwoSided => {
                self.decay_rate * (-2.0 * self.decay_rate * u.abs()).exp()
            }
        }
    }

    /// Full width at half maximum of the intensity profile, ns.
    pub fn duration_fwhm(&self) -> f64 {
        match self.shape {
            PacketShape::OneSided => std::f64::consts::LN_2 / self.decay_rate,
            PacketShape::TwoSided => std::f64::consts::LN_2 / self.decay_rate,
        }
    }

    /// Spectral FWHM in GHz. One-sided packets with dephasing have the
    /// Lorentzian width `(a + 2 gamma_d)/(2 pi)`.
    pub fn linewidth_fwhm_ghz(&self) -> f64 {
        match self.shape {
            PacketShape::OneSided => {
                (self.decay_rate + 2.0 * self.dephasing_rate) / (2.0 * PI)
            }
            PacketShape::TwoSided => {
                self.decay_rate * (std::f64::consts::SQRT_2 - 1.0).sqrt() / PI
            }
        }
    }

    /// Earliest time with nonzero intensity, used as a quadrature bound.
    pub fn support_start(&self) -> f64 {
        match self.shape {
            PacketShape::OneSided => self.origin,
            PacketShape::TwoSided => self.origin - 60.0 / self.decay_rate,
        }
    }

    /// Draw an emission time. One draw of an exponential magnitude, then
    /// (two-sided only) one uniform draw for the sign; the draw order is a
    /// stable contract for stream reproducibility.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.shape {
            PacketShape::OneSided => {
                let exp = Exp::new(self.decay_rate).expect("decay rate is positive");
                self.origin + exp.sample(rng)
            }
            PacketShape::TwoSided => {
                let exp = Exp::new(2.0 * self.decay_rate).expect("decay rate is positive");
                let mag = exp.sample(rng);
                if rng.gen::<f64>() < 0.5 {
                    self.origin - mag
                } else {
                    self.origin + mag
                }
            }
        }
    }
}

/// Normalized spectral intensity density in GHz^-1, centered at zero
/// detuning.
pub fn spectral_density(wp: &WavepacketSpec, nu_ghz: f64) -> f64 {
    match wp.shape {
        PacketShape::OneSided => {
            let half_width = 0.5 * wp.linewidth_fwhm_ghz();
            half_width / (PI * (half_width * half_width + nu_ghz * nu_ghz))
        }
        PacketShape::TwoSided => {
            let s = wp.decay_rate;
            let omega = 2.0 * PI * nu_ghz;
            let denom = s * s + omega * omega;
            4.0 * s * s * s / (denom * denom)
        }
    }
}

/// Scanning Fabry-Perot etalon parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FabryPerotSpec {
    pub free_spectral_range_ghz: f64,
    pub finesse: f64,
    pub center_offset_ghz: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FabryPerotError {
    #[error("free spectral range must be positive, got {0} GHz")]
    NonPositiveFsr(f64),
    #[error("finesse must exceed 1, got {0}")]
    FinesseTooLow(f64),
}

impl FabryPerotSpec {
    pub fn new(
        free_spectral_range_ghz: f64,
        finesse: f64,
        center_offset_ghz: f64,
    ) -> Result<Self, FabryPerotError> {
        if free_spectral_range_ghz <= 0.0 {
            return Err(FabryPerotError::NonPositiveFsr(free_spectral_range_ghz));
        }
        if finesse <= 1.0 {
            return Err(FabryPerotError::FinesseTooLow(finesse));
        }
        Ok(Self { free_spectral_range_ghz, finesse, center_offset_ghz })
    }

    /// Exact FWHM of one transmission peak, `(2 FSR / pi) asin(pi / 2F)`;
    /// approaches FSR/finesse for large finesse.
    pub fn peak_fwhm_ghz(&self) -> f64 {
        2.0 * self.free_spectral_range_ghz / PI * (PI / (2.0 * self.finesse)).asin()
    }
}

/// Airy transmission `1 / (1 + (2F/pi)^2 sin^2(pi (nu - offset) / FSR))`,
/// periodic in the free spectral range with unit peak transmittance.
pub fn fp_transmission(fp: &FabryPerotSpec, nu_ghz: f64) -> f64 {
    let coeff = 2.0 * fp.finesse / PI;
    let phase = PI * (nu_ghz - fp.center_offset_ghz) / fp.free_spectral_range_ghz;
    1.0 / (1.0 + coeff * coeff * phase.sin().powi(2))
}
