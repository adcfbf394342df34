//! JSON run configuration: schema with documented defaults, unknown-key
//! rejection, JSON-pointer error reporting, and resolution into a
//! coincidence model plus simulation parameters.

use crate::hom::{BackgroundShape, CoincidenceModel, Polarization};
use crate::mc::{self, ExperimentParams};
use crate::wavepacket::{self, PacketShape, WavepacketError, WavepacketSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Zero-delay coalescence used to calibrate the detector response when the
/// configuration fixes neither a width nor a target.
pub const DEFAULT_CALIBRATE_TARGET: f64 = 0.42;
/// Multi-photon admixture weight used when neither `epsilon` nor
/// `g2_zero_ratio` is given.
pub const DEFAULT_EPSILON: f64 = 0.165;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("invalid config value at {pointer}: {message}")]
    Invalid { pointer: String, message: String },
}

fn invalid(pointer: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { pointer: pointer.into(), message: message.into() }
}

/// Emitter and heralded-source physics. Either `epsilon` or
/// `g2_zero_ratio` may set the admixture weight (they are the same number
/// measured two ways); giving both is rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourcesConfig {
    pub qd_t1_ns: f64,
    pub qd_t2_ns: f64,
    pub pdc_filter_fwhm_ghz: f64,
    pub pdc_shape: PacketShape,
    pub detuning_ghz: f64,
    pub epsilon: Option<f64>,
    pub g2_zero_ratio: Option<f64>,
}

impl Default for SourcesConfig {
    fn default() -> Self {
        Self {
            qd_t1_ns: 0.83,
            qd_t2_ns: 0.29,
            pdc_filter_fwhm_ghz: 0.9,
            pdc_shape: PacketShape::OneSided,
            detuning_ghz: 0.0,
            epsilon: None,
            g2_zero_ratio: None,
        }
    }
}

/// Per-trial simulation parameters. `p_qd2: null` derives the second-photon
/// probability from the admixture weight so the synthetic streams carry the
/// same background the analytic model assumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub rep_rate_mhz: f64,
    pub n_trials: u64,
    pub p_herald: f64,
    pub p_pdc_given_herald: f64,
    pub p_qd: f64,
    pub p_qd2: Option<f64>,
    pub qd_pdc_ratio_check: Option<f64>,
    pub dark_rate_per_trial: f64,
    pub dead_time_ns: f64,
    pub seed: u64,
    pub polarization: Polarization,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rep_rate_mhz: 76.0,
            n_trials: 1_000_000,
            p_herald: 1.0,
            p_pdc_given_herald: 0.8,
            p_qd: 0.4,
            p_qd2: None,
            qd_pdc_ratio_check: Some(0.5),
            dark_rate_per_trial: 0.0,
            dead_time_ns: 0.0,
            seed: 1,
            polarization: Polarization::Perpendicular,
        }
    }
}

/// Histogram geometry and gating windows for the analysis stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub bin_width_ps: i64,
    pub dn_range: (i64, i64),
    pub gate_windows_ns: Vec<f64>,
    /// Half-width of the zero-delay acceptance in ps; null keeps the
    /// default single central bin.
    pub zero_window_ps: Option<i64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bin_width_ps: 64,
            dn_range: (-10, 10),
            gate_windows_ns: vec![0.29, 0.14],
            zero_window_ps: None,
        }
    }
}

/// Analytic-model options. Exactly one of `detector_fwhm_ns` and
/// `calibrate_target` applies; with neither given the response is
/// calibrated to `DEFAULT_CALIBRATE_TARGET`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub background_shape: BackgroundShape,
    pub detector_fwhm_ns: Option<f64>,
    pub calibrate_target: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            background_shape: BackgroundShape::QdOverlap,
            detector_fwhm_ns: None,
            calibrate_target: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigDocument {
    pub sources: SourcesConfig,
    pub experiment: ExperimentConfig,
    pub analysis: AnalysisConfig,
    pub model: ModelConfig,
}

/// Everything downstream stages need, derived from one document.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub model: CoincidenceModel,
    pub params: ExperimentParams,
    pub analysis: AnalysisConfig,
    pub epsilon: f64,
    pub detector_fwhm_ns: f64,
    /// True when the detector width came from calibration rather than an
    /// explicit `detector_fwhm_ns`.
    pub detector_calibrated: bool,
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for segment in path.iter() {
        out.push('/');
        match segment {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(key),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

pub fn parse_config(text: &str) -> Result<ConfigDocument, ConfigError> {
    let deserializer = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(deserializer).map_err(|err| ConfigError::Schema {
        pointer: json_pointer(err.path()),
        message: err.inner().to_string(),
    })
}

pub fn load_config(path: &Path) -> Result<ConfigDocument, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

fn qd_pointer(err: &WavepacketError) -> &'static str {
    match err {
        WavepacketError::NonPositiveLifetime(_) => "/sources/qd_t1_ns",
        _ => "/sources/qd_t2_ns",
    }
}

impl ConfigDocument {
    /// Effective admixture weight after the epsilon / g2_zero_ratio merge.
    pub fn effective_epsilon(&self) -> Result<f64, ConfigError> {
        match (self.sources.epsilon, self.sources.g2_zero_ratio) {
            (Some(_), Some(_)) => Err(invalid(
                "/sources/epsilon",
                "give either epsilon or g2_zero_ratio, not both",
            )),
            (Some(e), None) | (None, Some(e)) => Ok(e),
            (None, None) => Ok(DEFAULT_EPSILON),
        }
    }

    fn wavepackets(&self) -> Result<(WavepacketSpec, WavepacketSpec), ConfigError> {
        let wp_qd = wavepacket::qd_wavepacket(self.sources.qd_t1_ns, self.sources.qd_t2_ns)
            .map_err(|e| invalid(qd_pointer(&e), e.to_string()))?;
        let wp_pdc = match self.sources.pdc_shape {
            PacketShape::OneSided => wavepacket::pdc_wavepacket(self.sources.pdc_filter_fwhm_ghz),
            PacketShape::TwoSided => {
                wavepacket::pdc_wavepacket_two_sided(self.sources.pdc_filter_fwhm_ghz)
            }
        }
        .map_err(|e| invalid("/sources/pdc_filter_fwhm_ghz", e.to_string()))?;
        Ok((wp_qd, wp_pdc))
    }

    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        let epsilon = self.effective_epsilon()?;
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(invalid(
                "/sources/epsilon",
                format!("admixture weight must be non-negative and finite, got {epsilon}"),
            ));
        }
        let (wp_qd, wp_pdc) = self.wavepackets()?;
        if !(self.experiment.rep_rate_mhz > 0.0) {
            return Err(invalid(
                "/experiment/rep_rate_mhz",
                format!("must be positive, got {}", self.experiment.rep_rate_mhz),
            ));
        }
        let period_ns = 1000.0 / self.experiment.rep_rate_mhz;

        let build = |fwhm: f64| {
            CoincidenceModel::new(
                wp_qd,
                wp_pdc,
                epsilon,
                fwhm,
                self.model.background_shape,
                self.sources.detuning_ghz,
                period_ns,
            )
        };
        let (detector_fwhm_ns, detector_calibrated) =
            match (self.model.detector_fwhm_ns, self.model.calibrate_target) {
                (Some(_), Some(_)) => {
                    return Err(invalid(
                        "/model/detector_fwhm_ns",
                        "detector_fwhm_ns and calibrate_target are mutually exclusive",
                    ));
                }
                (Some(fwhm), None) => (fwhm, false),
                (None, target) => {
                    let target = target.unwrap_or(DEFAULT_CALIBRATE_TARGET);
                    let base = build(0.0)
                        .map_err(|e| invalid("/model", e.to_string()))?;
                    let fwhm = base
                        .calibrate_detector(target)
                        .map_err(|e| invalid("/model/calibrate_target", e.to_string()))?;
                    (fwhm, true)
                }
            };
        let model = build(detector_fwhm_ns).map_err(|e| {
            invalid(
                if detector_calibrated { "/model" } else { "/model/detector_fwhm_ns" },
                e.to_string(),
            )
        })?;

        let p_qd2 = self.experiment.p_qd2.unwrap_or_else(|| {
            mc::admixture_for_background_ratio(
                epsilon,
                self.experiment.p_qd,
                self.experiment.p_pdc_given_herald,
            )
        });
        let params = ExperimentParams {
            rep_rate: self.experiment.rep_rate_mhz,
            n_trials: self.experiment.n_trials,
            p_herald: self.experiment.p_herald,
            p_pdc_given_herald: self.experiment.p_pdc_given_herald,
            p_qd: self.experiment.p_qd,
            p_qd2,
            qd_pdc_ratio_check: self.experiment.qd_pdc_ratio_check,
            detector_fwhm: detector_fwhm_ns,
            dark_rate_per_trial: self.experiment.dark_rate_per_trial,
            dead_time: self.experiment.dead_time_ns,
            seed: self.experiment.seed,
            polarization: self.experiment.polarization,
        };
        params
            .validate()
            .map_err(|e| invalid("/experiment", e.to_string()))?;

        let analysis = self.analysis.clone();
        if analysis.bin_width_ps < 1 {
            return Err(invalid(
                "/analysis/bin_width_ps",
                format!("must be at least 1 ps, got {}", analysis.bin_width_ps),
            ));
        }
        if analysis.dn_range.0 > analysis.dn_range.1 {
            return Err(invalid(
                "/analysis/dn_range",
                format!("lower bound {} exceeds upper bound {}", analysis.dn_range.0, analysis.dn_range.1),
            ));
        }
        if let Some(w) = analysis.gate_windows_ns.iter().find(|&&w| !(w > 0.0)) {
            return Err(invalid(
                "/analysis/gate_windows_ns",
                format!("windows must be positive, got {w}"),
            ));
        }
        if let Some(w) = analysis.zero_window_ps {
            if w < 1 {
                return Err(invalid(
                    "/analysis/zero_window_ps",
                    format!("must be at least 1 ps, got {w}"),
                ));
            }
        }

        Ok(ResolvedConfig {
            model,
            params,
            analysis,
            epsilon,
            detector_fwhm_ns,
            detector_calibrated,
        })
    }
}
