//! Stochastic trial-by-trial simulation of the two-source interference
//! experiment and of the emitter autocorrelation (beam-splitter HBT)
//! measurement, emitting time-tag streams.
//!
//! Interference is realized by thinning the port assignment of
//! source-pair events rather than by sampling the joint two-time density
//! directly: a cross-port coincidence is accepted with probability
//! (1 - D*R)/2, which is exact and manifestly bounded because R <= 1 by
//! the arithmetic-geometric mean inequality.

use crate::hom::{CoincidenceModel, Polarization};
use crate::numeric;
use crate::tagstream::{
    TagStream, TagStreamHeader, TimestampRecord, CHANNEL_HERALD, CHANNEL_OUT1, CHANNEL_OUT2,
};
use crate::wavepacket::WavepacketSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Full experiment parameter set. Probabilities are per trial; times are
/// in nanoseconds; `rep_rate` is in MHz.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExperimentParams {
    pub rep_rate: f64,
    pub n_trials: u64,
    pub p_herald: f64,
    pub p_pdc_given_herald: f64,
    pub p_qd: f64,
    /// Probability of a second, non-interfering emitter photon per trial.
    pub p_qd2: f64,
    /// Expected detected-rate ratio p_qd / p_pdc_given_herald, recorded so
    /// simulation statistics can flag drift from the configured anchor.
    pub qd_pdc_ratio_check: Option<f64>,
    /// Per-detector Gaussian timing response FWHM, ns.
    pub detector_fwhm: f64,
    /// Mean dark counts per trial on each output channel.
    pub dark_rate_per_trial: f64,
    /// Per-channel intra-trial dead time, ns.
    pub dead_time: f64,
    pub seed: u64,
    pub polarization: Polarization,
}

impl ExperimentParams {
    pub fn period_ns(&self) -> f64 {
        1000.0 / self.rep_rate
    }

    pub fn validate(&self) -> Result<(), McError> {
        for (name, value) in [
            ("p_herald", self.p_herald),
            ("p_pdc_given_herald", self.p_pdc_given_herald),
            ("p_qd", self.p_qd),
            ("p_qd2", self.p_qd2),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(McError::ProbabilityOutOfRange { name, value });
            }
        }
        if !(self.rep_rate > 0.0) {
            return Err(McError::NonPositiveRepRate(self.rep_rate));
        }
        for (name, value) in [
            ("detector_fwhm", self.detector_fwhm),
            ("dark_rate_per_trial", self.dark_rate_per_trial),
            ("dead_time", self.dead_time),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(McError::NegativeField { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum McError {
    #[error("{name} must be a probability in [0, 1], got {value}")]
    ProbabilityOutOfRange { name: &'static str, value: f64 },
    #[error("rep_rate must be positive, got {0} MHz")]
    NonPositiveRepRate(f64),
    #[error("{name} must be non-negative and finite, got {value}")]
    NegativeField { name: &'static str, value: f64 },
    #[error(
        "autocorrelation zero-peak target {target} is outside (0, 0.5); \
         a single-emission source cannot reach 0.5"
    )]
    TargetRatioOutOfRange { target: f64 },
    #[error("zero-peak target {target} below the dark-count floor {floor}")]
    TargetBelowDarkFloor { target: f64, floor: f64 },
    #[error(
        "closed-form histogram expectations require p_herald = 1 and no darks \
         or dead time; got p_herald={p_herald}, dark_rate={dark_rate}, dead_time={dead_time}"
    )]
    ExpectationUnsupported { p_herald: f64, dark_rate: f64, dead_time: f64 },
}

/// Aggregate counters from one simulation run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SimStats {
    pub trials: u64,
    pub heralds: u64,
    pub pdc_photons: u64,
    pub qd_photons: u64,
    pub qd2_photons: u64,
    pub qd_present_in_heralded: u64,
    pub dark_counts: u64,
    pub dead_time_dropped: u64,
    /// Records emitted per channel after dead-time filtering.
    pub emitted: [u64; 3],
    /// Largest thinning ratio R seen; must stay <= 1.
    pub max_thinning_ratio: f64,
}

impl SimStats {
    fn merge(&mut self, other: &SimStats) {
        self.trials += other.trials;
        self.heralds += other.heralds;
        self.pdc_photons += other.pdc_photons;
        self.qd_photons += other.qd_photons;
        self.qd2_photons += other.qd2_photons;
        self.qd_present_in_heralded += other.qd_present_in_heralded;
        self.dark_counts += other.dark_counts;
        self.dead_time_dropped += other.dead_time_dropped;
        for ch in 0..3 {
            self.emitted[ch] += other.emitted[ch];
        }
        self.max_thinning_ratio = self.max_thinning_ratio.max(other.max_thinning_ratio);
    }

    /// z-score of the measured emitter-to-heralded-source presence-rate
    /// ratio against an expected anchor; None without heralded trials.
    pub fn herald_ratio_z(&self, expected_ratio: f64) -> Option<f64> {
        if self.heralds == 0 {
            return None;
        }
        let n = self.heralds as f64;
        let p_qd = self.qd_present_in_heralded as f64 / n;
        let p_pdc = self.pdc_photons as f64 / n;
        let var = (p_qd * (1.0 - p_qd) + expected_ratio * expected_ratio * p_pdc * (1.0 - p_pdc))
            / n;
        Some((p_qd - expected_ratio * p_pdc) / var.sqrt().max(f64::MIN_POSITIVE))
    }
}

#[derive(Debug)]
pub struct SimOutput {
    pub stream: TagStream,
    pub stats: SimStats,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-trial generator: output is a function of (seed, trial)
/// only, so any partition of the trial range yields identical streams.
fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        splitmix64(seed) ^ trial.wrapping_add(0x9E37_79B9_7F4A_7C15),
    ))
}

/// First 16 bytes of a SHA-256 over the canonical JSON of the generating
/// documents, stored in stream headers for provenance checks.
fn digest_documents<T: Serialize>(mode: &str, documents: &T) -> [u8; 16] {
    let mut hasher = Sha256::new();
    hasher.update(mode.as_bytes());
    hasher.update(serde_json::to_string(documents).expect("parameter documents serialize"));
    let full = hasher.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&full[..16]);
    out
}

pub fn hom_params_digest(params: &ExperimentParams, model: &CoincidenceModel) -> [u8; 16] {
    digest_documents("hom", &(params, model))
}

pub fn hbt_params_digest(params: &ExperimentParams, wp_qd: &WavepacketSpec) -> [u8; 16] {
    digest_documents("hbt", &(params, wp_qd))
}

struct TrialContext<'a> {
    params: &'a ExperimentParams,
    wp_qd: WavepacketSpec,
    wp_pdc: Option<WavepacketSpec>,
    jitter: Option<Normal<f64>>,
    darks: Option<Poisson<f64>>,
    gamma_sum: f64,
    omega: f64,
}

impl<'a> TrialContext<'a> {
    fn for_hom(params: &'a ExperimentParams, model: &'a CoincidenceModel) -> Self {
        let sigma = numeric::sigma_from_fwhm(params.detector_fwhm);
        Self {
            params,
            wp_qd: model.wp_qd,
            wp_pdc: Some(model.wp_pdc),
            jitter: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma")),
            darks: (params.dark_rate_per_trial > 0.0)
                .then(|| Poisson::new(params.dark_rate_per_trial).expect("positive mean")),
            gamma_sum: model.gamma_sum(),
            omega: 2.0 * std::f64::consts::PI * model.detuning_ghz,
        }
    }

    fn for_hbt(params: &'a ExperimentParams, wp_qd: WavepacketSpec) -> Self {
        let sigma = numeric::sigma_from_fwhm(params.detector_fwhm);
        Self {
            params,
            wp_qd,
            wp_pdc: None,
            jitter: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma")),
            darks: (params.dark_rate_per_trial > 0.0)
                .then(|| Poisson::new(params.dark_rate_per_trial).expect("positive mean")),
            gamma_sum: 0.0,
            omega: 0.0,
        }
    }
}

/// Thinning ratio R(t1, t2) = 2 xi1(t1) xi2(t2) xi1(t2) xi2(t1) /
/// [p1(t1) p2(t2) + p1(t2) p2(t1)], bounded by 1.
fn thinning_ratio(wp_qd: &WavepacketSpec, wp_pdc: &WavepacketSpec, t1: f64, t2: f64) -> f64 {
    let num = 2.0
        * wp_qd.amplitude(t1)
        * wp_pdc.amplitude(t2)
        * wp_qd.amplitude(t2)
        * wp_pdc.amplitude(t1);
    let den = wp_qd.density(t1) * wp_pdc.density(t2) + wp_qd.density(t2) * wp_pdc.density(t1);
    if den == 0.0 {
        return 0.0;
    }
    num / den
}

/// Simulate one trial into `sink`. Draw order is a fixed reproducibility
/// contract: presence flags (herald, pdc | herald, qd, qd2), then emission
/// times (pdc, qd, qd2), then routing (pair accept + side, then singles),
/// then jitter (pdc, qd, qd2), then darks (channel 1 count+times, then
/// channel 2). Changing it changes every seeded stream.
fn simulate_trial(
    ctx: &TrialContext<'_>,
    trial: u64,
    sink: &mut Vec<TimestampRecord>,
    stats: &mut SimStats,
    channel_times: &mut [Vec<f64>; 2],
) {
    let params = ctx.params;
    let mut rng = trial_rng(params.seed, trial);
    stats.trials += 1;
    channel_times[0].clear();
    channel_times[1].clear();

    let herald = ctx.wp_pdc.is_some() && rng.gen::<f64>() < params.p_herald;
    let pdc_present = herald && rng.gen::<f64>() < params.p_pdc_given_herald;
    let qd_present = rng.gen::<f64>() < params.p_qd;
    let qd2_present = rng.gen::<f64>() < params.p_qd2;
    if herald {
        stats.heralds += 1;
        if qd_present {
            stats.qd_present_in_heralded += 1;
        }
    }
    if pdc_present {
        stats.pdc_photons += 1;
    }
    if qd_present {
        stats.qd_photons += 1;
    }
    if qd2_present {
        stats.qd2_photons += 1;
    }

    let t_pdc = pdc_present.then(|| ctx.wp_pdc.expect("pdc packet").sample(&mut rng));
    let t_qd = qd_present.then(|| ctx.wp_qd.sample(&mut rng));
    let t_qd2 = qd2_present.then(|| ctx.wp_qd.sample(&mut rng));

    // Routing: (time, port index 0/1) pairs.
    let mut placed: [Option<(f64, usize)>; 3] = [None, None, None];
    match (t_qd, t_pdc) {
        (Some(t1), Some(t2)) => {
            let wp_pdc = ctx.wp_pdc.as_ref().expect("pdc packet");
            let r = match params.polarization {
                Polarization::Parallel => thinning_ratio(&ctx.wp_qd, wp_pdc, t1, t2),
                Polarization::Perpendicular => 0.0,
            };
            assert!(r <= 1.0 + 1e-9, "thinning ratio {r} exceeds 1");
            stats.max_thinning_ratio = stats.max_thinning_ratio.max(r);
            let dt = t1 - t2;
            let d = (-ctx.gamma_sum * dt.abs()).exp()
                * if ctx.omega == 0.0 { 1.0 } else { (ctx.omega * dt).cos() };
            let accept_cross = rng.gen::<f64>() < 0.5 * (1.0 - d * r);
            let first_port = usize::from(rng.gen::<f64>() < 0.5);
            placed[0] = Some((t1, first_port));
            placed[1] = Some((t2, if accept_cross { 1 - first_port } else { first_port }));
        }
        (Some(t1), None) => placed[0] = Some((t1, usize::from(rng.gen::<f64>() < 0.5))),
        (None, Some(t2)) => placed[1] = Some((t2, usize::from(rng.gen::<f64>() < 0.5))),
        (None, None) => {}
    }
    if let Some(t) = t_qd2 {
        placed[2] = Some((t, usize::from(rng.gen::<f64>() < 0.5)));
    }

    // Jitter in emission order: pdc, qd, qd2.
    for slot in [1, 0, 2] {
        if let Some((t, port)) = placed[slot] {
            let jittered = match &ctx.jitter {
                Some(normal) => t + normal.sample(&mut rng),
                None => t,
            };
            channel_times[port].push(jittered);
        }
    }

    if let Some(poisson) = &ctx.darks {
        let period = params.period_ns();
        for times in channel_times.iter_mut() {
            let k = poisson.sample(&mut rng) as u64;
            stats.dark_counts += k;
            for _ in 0..k {
                times.push(rng.gen::<f64>() * period);
            }
        }
    }

    if herald {
        sink.push(TimestampRecord { trial_index: trial, channel: CHANNEL_HERALD, time_ps: 0 });
        stats.emitted[CHANNEL_HERALD as usize] += 1;
    }
    for (idx, channel) in [(0usize, CHANNEL_OUT1), (1usize, CHANNEL_OUT2)] {
        let times = &mut channel_times[idx];
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite detection times"));
        let mut last_kept = f64::NEG_INFINITY;
        for &t in times.iter() {
            if params.dead_time > 0.0 && t - last_kept < params.dead_time {
                stats.dead_time_dropped += 1;
                continue;
            }
            last_kept = t;
            sink.push(TimestampRecord {
                trial_index: trial,
                channel,
                time_ps: (t * 1000.0).round() as i64,
            });
            stats.emitted[channel as usize] += 1;
        }
    }
}

fn run_trials(
    ctx: &TrialContext<'_>,
    threads: usize,
    digest: [u8; 16],
) -> Result<SimOutput, McError> {
    ctx.params.validate()?;
    let params = ctx.params;
    let n = params.n_trials;
    let threads = threads.max(1).min(n.max(1) as usize);
    let chunk = n.div_ceil(threads as u64).max(1);
    let ranges: Vec<(u64, u64)> =
        (0..n).step_by(chunk as usize).map(|lo| (lo, (lo + chunk).min(n))).collect();

    let mut parts: Vec<(Vec<TimestampRecord>, SimStats)> = Vec::with_capacity(ranges.len());
    if ranges.len() <= 1 {
        let mut sink = Vec::new();
        let mut stats = SimStats::default();
        let mut buffers = [Vec::new(), Vec::new()];
        for trial in 0..n {
            simulate_trial(ctx, trial, &mut sink, &mut stats, &mut buffers);
        }
        parts.push((sink, stats));
    } else {
        // Trials are independent; chunks merge in range order so the output
        // is identical for every thread count.
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|&(lo, hi)| {
                    scope.spawn(move || {
                        let mut sink = Vec::new();
                        let mut stats = SimStats::default();
                        let mut buffers = [Vec::new(), Vec::new()];
                        for trial in lo..hi {
                            simulate_trial(ctx, trial, &mut sink, &mut stats, &mut buffers);
                        }
                        (sink, stats)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Vec<_>>()
        });
        parts = results;
    }

    let mut records = Vec::with_capacity(parts.iter().map(|(r, _)| r.len()).sum());
    let mut stats = SimStats::default();
    for (part_records, part_stats) in parts {
        records.extend(part_records);
        stats.merge(&part_stats);
    }
    let header = TagStreamHeader::new(params.rep_rate, params.n_trials, Some(params.seed), digest);
    Ok(SimOutput { stream: TagStream { header, records }, stats })
}

/// Simulate the full two-source interference experiment.
pub fn run_hom_simulation(
    params: &ExperimentParams,
    model: &CoincidenceModel,
    threads: usize,
) -> Result<SimOutput, McError> {
    let ctx = TrialContext::for_hom(params, model);
    run_trials(&ctx, threads, hom_params_digest(params, model))
}

/// Simulate the emitter-only autocorrelation measurement: the source is
/// split to channels 1-2; no herald channel is produced and p_herald,
/// p_pdc_given_herald are ignored.
pub fn run_hbt_simulation(
    params: &ExperimentParams,
    wp_qd: &WavepacketSpec,
    threads: usize,
) -> Result<SimOutput, McError> {
    let ctx = TrialContext::for_hbt(params, *wp_qd);
    run_trials(&ctx, threads, hbt_params_digest(params, wp_qd))
}

/// Expected zero-peak/side-peak area ratio of the autocorrelation under
/// the per-trial Bernoulli/Poisson model, exact in expectation.
pub fn hbt_zero_side_ratio(p_qd: f64, p_qd2: f64, dark_per_channel: f64) -> f64 {
    let (q1, q2, d) = (p_qd, p_qd2, dark_per_channel);
    let zero = 0.5 * q1 * q2 + (q1 + q2) * d + d * d;
    let mean = 0.5 * (q1 + q2) + d;
    zero / (mean * mean)
}

/// Solve for the second-photon probability reproducing a target zero-peak
/// ratio; closed Bernoulli accounting, root-found to 1e-4 or better.
pub fn calibrate_p_qd2(target_ratio: f64, params: &ExperimentParams) -> Result<f64, McError> {
    if target_ratio == 0.0 {
        return Ok(0.0);
    }
    if !(0.0..0.5).contains(&target_ratio) {
        return Err(McError::TargetRatioOutOfRange { target: target_ratio });
    }
    params.validate()?;
    let floor = hbt_zero_side_ratio(params.p_qd, 0.0, params.dark_rate_per_trial);
    let ceiling = hbt_zero_side_ratio(params.p_qd, params.p_qd, params.dark_rate_per_trial);
    if target_ratio < floor {
        return Err(McError::TargetBelowDarkFloor { target: target_ratio, floor });
    }
    if target_ratio > ceiling {
        return Err(McError::TargetRatioOutOfRange { target: target_ratio });
    }
    let f = |q2: f64| {
        hbt_zero_side_ratio(params.p_qd, q2, params.dark_rate_per_trial) - target_ratio
    };
    numeric::find_root(f, 0.0, params.p_qd, 1e-7).map_err(|_| McError::TargetRatioOutOfRange {
        target: target_ratio,
    })
}

/// Second-photon probability that makes the simulated admixture-pair area
/// a fraction `epsilon` of the source-pair area, matching the analytic
/// model's background weight: both emitter-emitter and second-emitter/
/// heralded-source pairs count toward the admixture.
pub fn admixture_for_background_ratio(epsilon: f64, p_qd: f64, p_pdc_effective: f64) -> f64 {
    epsilon / (1.0 / p_qd + 1.0 / p_pdc_effective)
}

/// Expected zero-trial-difference histogram counts per tau bin for a run
/// with every trial heralded and no darks or dead time; bin k spans
/// [k*w - w/2, k*w + w/2) ps for k in -k_max..=k_max.
pub fn expected_zero_bin_counts(
    params: &ExperimentParams,
    model: &CoincidenceModel,
    bin_width_ps: i64,
    k_max: i64,
) -> Result<Vec<f64>, McError> {
    params.validate()?;
    if params.p_herald != 1.0 || params.dark_rate_per_trial != 0.0 || params.dead_time != 0.0 {
        return Err(McError::ExpectationUnsupported {
            p_herald: params.p_herald,
            dark_rate: params.dark_rate_per_trial,
            dead_time: params.dead_time,
        });
    }
    let n = params.n_trials as f64;
    let p_eff = params.p_pdc_given_herald;
    let w_signal = n * params.p_qd * p_eff;
    let w_qdqd = 0.5 * n * params.p_qd * params.p_qd2;
    let w_qd2_pdc = n * params.p_qd2 * p_eff;

    // The simulation convolves each detection with the detector response,
    // so expectations use the convolved densities; the admixture model
    // epsilon is not used here because the pair species are explicit.
    let mut signal_free = *model;
    signal_free.epsilon = 0.0;
    signal_free.detector_fwhm = params.detector_fwhm;
    let sigma_pair = numeric::sigma_from_fwhm(params.detector_fwhm) * std::f64::consts::SQRT_2;
    let gamma = model.wp_qd.decay_rate;
    let qdqd_density = |tau: f64| {
        if sigma_pair > 0.0 {
            0.5 * gamma * numeric::exp_abs_conv_gauss(gamma, sigma_pair, tau)
        } else {
            0.5 * gamma * (-gamma * tau.abs()).exp()
        }
    };

    let width_ns = bin_width_ps as f64 / 1000.0;
    let mut out = Vec::with_capacity((2 * k_max + 1) as usize);
    for k in -k_max..=k_max {
        let lo = (k as f64 - 0.5) * width_ns;
        let hi = (k as f64 + 0.5) * width_ns;
        let signal = numeric::integrate(
            |t| signal_free.signal_correlation(t, params.polarization),
            lo,
            hi,
            1e-12,
        );
        let qdqd = numeric::integrate(&qdqd_density, lo, hi, 1e-12);
        let qd2_pdc = numeric::integrate(
            |t| signal_free.signal_correlation(t, Polarization::Perpendicular),
            lo,
            hi,
            1e-12,
        );
        out.push(w_signal * signal + w_qdqd * qdqd + w_qd2_pdc * qd2_pdc);
    }
    Ok(out)
}
