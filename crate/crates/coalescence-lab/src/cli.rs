//! Command-line entry points: stream synthesis, histogram analysis,
//! analytic curve export, least-squares fitting, and a one-shot report
//! that recomputes the published reference values with fixed seeds.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 reference-comparison failure (reproduce-paper only).

use crate::analysis::{self, CoalescenceEstimate, CorrelationHistogram, GatedEstimate};
use crate::config::{ConfigDocument, ConfigError, ResolvedConfig};
use crate::fit::{self, DetectorResponse, FitResult};
use crate::hom::{BackgroundShape, CoincidenceModel, Polarization};
use crate::mc::{self, SimStats};
use crate::tagstream::{self, TagStream};
use crate::wavepacket;
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Comparison(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) | AppError::Usage(_) => 2,
            AppError::Data(_) => 3,
            AppError::Comparison(_) => 4,
        }
    }
}

fn data_err(err: impl std::fmt::Display) -> AppError {
    AppError::Data(err.to_string())
}

/// Write a line to stdout, tolerating a closed pipe (e.g. `| head`).
fn emit(text: &str) {
    let mut out = std::io::stdout();
    let _ = out.write_all(text.as_bytes());
    let _ = out.write_all(b"\n");
}

#[derive(Parser)]
#[command(
    name = "coalescence-lab",
    version,
    about = "Two-photon interference between dissimilar single-photon sources: \
             stream simulation, correlation analysis, analytic model, fits"
)]
pub struct Cli {
    /// Worker threads for simulation (output is identical for any count).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum PolarizationArg {
    Perpendicular,
    Parallel,
}

impl From<PolarizationArg> for Polarization {
    fn from(p: PolarizationArg) -> Self {
        match p {
            PolarizationArg::Perpendicular => Polarization::Perpendicular,
            PolarizationArg::Parallel => Polarization::Parallel,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum SimMode {
    /// Two-source interference: herald on channel 0, outputs on 1 and 2.
    Hom,
    /// Emitter autocorrelation: one source split onto channels 1 and 2.
    Hbt,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Heralded,
    Unheralded,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum FitShape {
    Lorentzian,
    Expgauss,
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize a time-tag stream from the configured experiment.
    Simulate {
        /// JSON configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output stream path (.tags binary or .csv).
        #[arg(long)]
        out: PathBuf,
        /// Seed override (beats COALESCENCE_LAB_SEED and the config value).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        polarization: Option<PolarizationArg>,
        #[arg(long, value_enum, default_value_t = SimMode::Hom)]
        mode: SimMode,
    },
    /// Build correlation histograms and coalescence estimates from streams.
    Analyze {
        #[arg(long = "in-perp")]
        in_perp: PathBuf,
        #[arg(long = "in-par")]
        in_par: PathBuf,
        #[arg(long, value_enum, default_value_t = AnalyzeMode::Heralded)]
        mode: AnalyzeMode,
        /// Gate windows in ns (repeatable or comma-separated); heralded only.
        #[arg(long = "gate-ns", value_delimiter = ',')]
        gate_ns: Vec<f64>,
        /// JSON configuration for the analysis section; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export analytic correlation curves and model metrics.
    Model {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Curve CSV path (tau_ns, perpendicular, parallel, parallel_ideal).
        #[arg(long)]
        out: PathBuf,
        /// Half-range of the exported delay axis, ns.
        #[arg(long, default_value_t = 6.0)]
        tau_max: f64,
        #[arg(long, default_value_t = 1201)]
        points: usize,
    },
    /// Least-squares fit of a two-column x,y CSV.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        shape: FitShape,
        /// Fix the Gaussian detector FWHM (ns) in expgauss fits; fitted when omitted.
        #[arg(long = "detector-fwhm")]
        detector_fwhm: Option<f64>,
        /// Result JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the published reference values at fixed seeds and emit a
    /// pass/fail comparison table (exit 4 when any row fails).
    ReproducePaper {
        /// Directory for report.json, report.csv, and the streams used.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    if cli.threads == 0 {
        return Err(AppError::Usage("--threads must be at least 1".into()));
    }
    let threads = cli.threads;
    match cli.command {
        Command::Simulate { config, out, seed, polarization, mode } => {
            cmd_simulate(config.as_deref(), &out, seed, polarization, mode, threads)
        }
        Command::Analyze { in_perp, in_par, mode, gate_ns, config, out } => {
            cmd_analyze(&in_perp, &in_par, mode, &gate_ns, config.as_deref(), out.as_deref())
        }
        Command::Model { config, out, tau_max, points } => {
            cmd_model(config.as_deref(), &out, tau_max, points)
        }
        Command::Fit { input, shape, detector_fwhm, out } => {
            cmd_fit(&input, shape, detector_fwhm, out.as_deref())
        }
        Command::ReproducePaper { out } => cmd_reproduce(&out, threads),
    }
}

fn load(config: Option<&Path>) -> Result<(ConfigDocument, ResolvedConfig), AppError> {
    let doc = match config {
        Some(path) => crate::config::load_config(path)?,
        None => ConfigDocument::default(),
    };
    let resolved = doc.resolve()?;
    Ok((doc, resolved))
}

/// Seed precedence: CLI flag, then environment value, then configuration.
fn effective_seed(
    cli_seed: Option<u64>,
    env_seed: Option<&str>,
    config_seed: u64,
) -> Result<u64, AppError> {
    if let Some(seed) = cli_seed {
        return Ok(seed);
    }
    if let Some(value) = env_seed {
        return value.trim().parse::<u64>().map_err(|_| {
            AppError::Usage(format!(
                "COALESCENCE_LAB_SEED must be an unsigned integer, got {value:?}"
            ))
        });
    }
    Ok(config_seed)
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(value).map_err(data_err)?;
    match out {
        Some(path) => {
            std::fs::write(path, text + "\n")
                .map_err(|e| AppError::Data(format!("cannot write {}: {e}", path.display())))
        }
        None => {
            emit(&text);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SimulateSummary {
    mode: &'static str,
    polarization: Polarization,
    seed: u64,
    n_trials: u64,
    records: usize,
    params_digest: String,
    out: String,
    stats: SimStats,
}

fn cmd_simulate(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    polarization: Option<PolarizationArg>,
    mode: SimMode,
    threads: usize,
) -> Result<(), AppError> {
    let (_, resolved) = load(config)?;
    let mut params = resolved.params;
    let env = std::env::var("COALESCENCE_LAB_SEED").ok();
    params.seed = effective_seed(seed, env.as_deref(), params.seed)?;
    if let Some(pol) = polarization {
        params.polarization = pol.into();
    }
    let output = match mode {
        SimMode::Hom => mc::run_hom_simulation(&params, &resolved.model, threads),
        SimMode::Hbt => mc::run_hbt_simulation(&params, &resolved.model.wp_qd, threads),
    }
    .map_err(data_err)?;
    tagstream::write_stream(out, &output.stream).map_err(data_err)?;
    let summary = SimulateSummary {
        mode: match mode {
            SimMode::Hom => "hom",
            SimMode::Hbt => "hbt",
        },
        polarization: params.polarization,
        seed: params.seed,
        n_trials: params.n_trials,
        records: output.stream.records.len(),
        params_digest: hex16(&output.stream.header.params_digest),
        out: out.display().to_string(),
        stats: output.stats,
    };
    write_json(None, &summary)
}

fn hex16(bytes: &[u8; 16]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_streams(in_perp: &Path, in_par: &Path) -> Result<(TagStream, TagStream), AppError> {
    let perp = tagstream::read_stream_to_end(in_perp)
        .map_err(|e| AppError::Data(format!("{}: {e}", in_perp.display())))?;
    let par = tagstream::read_stream_to_end(in_par)
        .map_err(|e| AppError::Data(format!("{}: {e}", in_par.display())))?;
    Ok((perp, par))
}

#[derive(Serialize)]
struct HeraldedAnalysis {
    mode: &'static str,
    trials_perp: u64,
    trials_par: u64,
    estimate: CoalescenceEstimate,
    zero_delay: CoalescenceEstimate,
    gates: Vec<GatedEstimate>,
    hist_perp: CorrelationHistogram,
    hist_par: CorrelationHistogram,
}

#[derive(Serialize)]
struct UnheraldedAnalysis {
    mode: &'static str,
    #[serde(flatten)]
    report: analysis::UnheraldedReport,
}

fn cmd_analyze(
    in_perp: &Path,
    in_par: &Path,
    mode: AnalyzeMode,
    gate_ns: &[f64],
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), AppError> {
    let (doc, _) = load(config)?;
    let settings = doc.analysis;
    let (stream_perp, stream_par) = read_streams(in_perp, in_par)?;
    if stream_perp.header.rep_rate != stream_par.header.rep_rate {
        return Err(AppError::Data(format!(
            "repetition rate mismatch between the streams: {} vs {} MHz",
            stream_perp.header.rep_rate, stream_par.header.rep_rate
        )));
    }
    match mode {
        AnalyzeMode::Heralded => {
            let perp = analysis::condition_on_herald(&stream_perp);
            let par = analysis::condition_on_herald(&stream_par);
            let hist_perp =
                analysis::build_cross_correlation(&perp, settings.dn_range, settings.bin_width_ps)
                    .map_err(data_err)?;
            let hist_par =
                analysis::build_cross_correlation(&par, settings.dn_range, settings.bin_width_ps)
                    .map_err(data_err)?;
            let estimate = analysis::estimate_coalescence(&hist_perp, &hist_par).map_err(data_err)?;
            let zero_delay =
                analysis::estimate_zero_coalescence(&hist_perp, &hist_par, settings.zero_window_ps)
                    .map_err(data_err)?;
            let windows = if gate_ns.is_empty() { &settings.gate_windows_ns } else { gate_ns };
            let gates = windows
                .iter()
                .map(|&w| analysis::gated_estimate(&perp, &par, w))
                .collect::<Result<Vec<_>, _>>()
                .map_err(data_err)?;
            let report = HeraldedAnalysis {
                mode: "heralded",
                trials_perp: perp.header.n_trials,
                trials_par: par.header.n_trials,
                estimate,
                zero_delay,
                gates,
                hist_perp,
                hist_par,
            };
            write_json(out, &report)
        }
        AnalyzeMode::Unheralded => {
            let report = analysis::unheralded_analysis(
                &stream_perp,
                &stream_par,
                settings.dn_range,
                settings.bin_width_ps,
            )
            .map_err(data_err)?;
            write_json(out, &UnheraldedAnalysis { mode: "unheralded", report })
        }
    }
}

#[derive(Serialize)]
struct GateSummary {
    window_ns: f64,
    p_c_fraction: f64,
    retention: f64,
}

#[derive(Serialize)]
struct ModelSummary {
    p_c: f64,
    area_perp: f64,
    area_par: f64,
    coalescence_zero: f64,
    detector_fwhm_ns: f64,
    detector_calibrated: bool,
    epsilon: f64,
    gates: Vec<GateSummary>,
    curves: String,
}

fn cmd_model(
    config: Option<&Path>,
    out: &Path,
    tau_max: f64,
    points: usize,
) -> Result<(), AppError> {
    if !(tau_max > 0.0) || points < 2 {
        return Err(AppError::Usage(
            "--tau-max must be positive and --points at least 2".into(),
        ));
    }
    let (_, resolved) = load(config)?;
    let model = &resolved.model;
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(out)
            .map_err(|e| AppError::Data(format!("cannot write {}: {e}", out.display())))?,
    );
    writeln!(file, "tau_ns,perpendicular,parallel,parallel_ideal").map_err(data_err)?;
    for sample in model.correlation_curves(tau_max, points) {
        writeln!(
            file,
            "{},{},{},{}",
            sample.tau_ns, sample.c_perp, sample.c_par, sample.c_par_ideal
        )
        .map_err(data_err)?;
    }
    file.flush().map_err(data_err)?;

    let metrics = model.coalescence_metrics();
    let gates = resolved
        .analysis
        .gate_windows_ns
        .iter()
        .map(|&w| {
            model.gated_coalescence(w).map(|g| GateSummary {
                window_ns: w,
                p_c_fraction: g.p_c_fraction,
                retention: g.retention,
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(data_err)?;
    let summary = ModelSummary {
        p_c: metrics.p_c,
        area_perp: metrics.area_perp,
        area_par: metrics.area_par,
        coalescence_zero: model.coalescence_zero(),
        detector_fwhm_ns: resolved.detector_fwhm_ns,
        detector_calibrated: resolved.detector_calibrated,
        epsilon: resolved.epsilon,
        gates,
        curves: out.display().to_string(),
    };
    write_json(None, &summary)
}

fn read_xy_csv(path: &Path) -> Result<Vec<(f64, f64)>, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(',');
        let mut parse = || cols.next().and_then(|v| v.trim().parse::<f64>().ok());
        match (parse(), parse()) {
            (Some(x), Some(y)) => samples.push((x, y)),
            // A single leading non-numeric line is a header.
            _ if lineno == 0 => continue,
            _ => {
                return Err(AppError::Data(format!(
                    "{}:{}: expected two numeric columns, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
    }
    Ok(samples)
}

#[derive(Serialize)]
struct FitOutput {
    shape: &'static str,
    input: String,
    result: FitResult,
}

fn cmd_fit(
    input: &Path,
    shape: FitShape,
    detector_fwhm: Option<f64>,
    out: Option<&Path>,
) -> Result<(), AppError> {
    let samples = read_xy_csv(input)?;
    let (shape_name, result) = match shape {
        FitShape::Lorentzian => {
            if detector_fwhm.is_some() {
                return Err(AppError::Usage(
                    "--detector-fwhm applies only to --shape expgauss".into(),
                ));
            }
            ("lorentzian", fit::fit_lorentzian(&samples).map_err(data_err)?)
        }
        FitShape::Expgauss => {
            let detector = match detector_fwhm {
                Some(w) => DetectorResponse::Known(w),
                None => DetectorResponse::Free,
            };
            ("expgauss", fit::fit_exp_gauss(&samples, detector).map_err(data_err)?)
        }
    };
    write_json(
        out,
        &FitOutput { shape: shape_name, input: input.display().to_string(), result },
    )
}

#[derive(Serialize)]
struct ReportRow {
    name: &'static str,
    anchor: String,
    computed: f64,
    lo: f64,
    hi: f64,
    pass: bool,
}

fn row(name: &'static str, anchor: impl Into<String>, computed: f64, lo: f64, hi: f64) -> ReportRow {
    let pass = computed.is_finite() && computed >= lo && computed <= hi;
    ReportRow { name, anchor: anchor.into(), computed, lo, hi, pass }
}

#[derive(Serialize)]
struct Report {
    rows: Vec<ReportRow>,
    rows_total: usize,
    rows_passed: usize,
    all_pass: bool,
}

/// Synthetic Lorentzian spectrum with multiplicative detection noise.
fn synthetic_spectrum(fwhm: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..161)
        .map(|i| {
            let x = -4.0 + 8.0 * i as f64 / 160.0;
            let u = 2.0 * x / fwhm;
            let clean = 0.02 + 1.0 / (1.0 + u * u);
            let noise: f64 = StandardNormal.sample(&mut rng);
            (x, clean * (1.0 + 0.05 * noise))
        })
        .collect()
}

/// Synthetic decay histogram: one-sided exponential through a Gaussian
/// timing response, with additive counting noise.
fn synthetic_decay(lifetime: f64, fwhm: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = crate::numeric::sigma_from_fwhm(fwhm);
    (0..240)
        .map(|i| {
            let t = -1.0 + 6.0 * i as f64 / 239.0;
            let clean =
                1000.0 * crate::numeric::exp_one_sided_conv_gauss(1.0 / lifetime, sigma, t - 0.2);
            let noise: f64 = StandardNormal.sample(&mut rng);
            (t, clean + 8.0 * noise)
        })
        .collect()
}

fn cmd_reproduce(out_dir: &Path, threads: usize) -> Result<(), AppError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| AppError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let doc = ConfigDocument::default();
    let resolved = doc.resolve()?;
    let model = &resolved.model;
    let mut rows = Vec::new();

    // Analytic block.
    rows.push(row("p_c_max", "0.27 +/- 0.03", model.coalescence_probability(), 0.24, 0.30));

    let ideal = {
        let mut d = ConfigDocument::default();
        d.sources.epsilon = Some(0.0);
        d.model.detector_fwhm_ns = Some(0.0);
        d.resolve()?.model
    };
    rows.push(row(
        "p_c_ideal_sources",
        "0.3165 +/- 0.0001",
        ideal.coalescence_probability(),
        0.3165 - 1e-4,
        0.3165 + 1e-4,
    ));

    let pure = wavepacket::qd_wavepacket(0.83, 2.0 * 0.83).map_err(data_err)?;
    let identical = CoincidenceModel::new(
        pure,
        pure,
        0.0,
        0.0,
        BackgroundShape::QdOverlap,
        0.0,
        1000.0 / 76.0,
    )
    .map_err(data_err)?;
    rows.push(row(
        "p_c_identical_pure",
        "1 for identical decoherence-free sources",
        identical.coalescence_probability(),
        1.0 - 1e-6,
        1.0 + 1e-6,
    ));

    let gate_wide = model.gated_coalescence(0.29).map_err(data_err)?;
    rows.push(row("gate_290ps_fraction", "0.61 +/- 0.06", gate_wide.p_c_fraction, 0.55, 0.67));
    rows.push(row("gate_290ps_retention", "0.25 +/- 0.03", gate_wide.retention, 0.22, 0.28));
    let gate_narrow = model.gated_coalescence(0.14).map_err(data_err)?;
    rows.push(row("gate_140ps_fraction", "0.75 +/- 0.06", gate_narrow.p_c_fraction, 0.69, 0.81));
    rows.push(row("gate_140ps_retention", "0.10 +/- 0.02", gate_narrow.retention, 0.08, 0.12));

    rows.push(row(
        "detector_calibrated_zero",
        "0.42 +/- 0.001",
        model.coalescence_zero(),
        0.42 - 1e-3,
        0.42 + 1e-3,
    ));
    rows.push(row(
        "detector_fwhm_ns",
        "unique width in (0 .. 2) ns",
        resolved.detector_fwhm_ns,
        1e-9,
        2.0,
    ));
    for (name, shape) in [
        ("zero_ideal_detector_overlap_bg", BackgroundShape::QdOverlap),
        ("zero_ideal_detector_flat_bg", BackgroundShape::FlatWithinPeak),
    ] {
        let mut d = ConfigDocument::default();
        d.model.detector_fwhm_ns = Some(0.0);
        d.model.background_shape = shape;
        let zero = d.resolve()?.model.coalescence_zero();
        rows.push(row(name, "0.86 to 0.99 without timing response", zero, 0.86, 0.99));
    }

    let qd_linewidth = model.wp_qd.linewidth_fwhm_ghz();
    rows.push(row("qd_linewidth_ghz", "1.1 +/- 0.1 GHz", qd_linewidth, 1.0, 1.2));
    let filter_linewidth = model.wp_pdc.linewidth_fwhm_ghz();
    rows.push(row("filter_linewidth_ghz", "0.9 +/- 0.1 GHz", filter_linewidth, 0.8, 1.0));

    // Simulated interference streams, written out and read back.
    let mut params_perp = resolved.params;
    params_perp.n_trials = 1_000_000;
    params_perp.seed = 1010;
    params_perp.polarization = Polarization::Perpendicular;
    let mut params_par = params_perp;
    params_par.seed = 1011;
    params_par.polarization = Polarization::Parallel;
    let sim_perp = mc::run_hom_simulation(&params_perp, model, threads).map_err(data_err)?;
    let sim_par = mc::run_hom_simulation(&params_par, model, threads).map_err(data_err)?;
    let path_perp = out_dir.join("hom_perpendicular.tags");
    let path_par = out_dir.join("hom_parallel.tags");
    tagstream::write_stream(&path_perp, &sim_perp.stream).map_err(data_err)?;
    tagstream::write_stream(&path_par, &sim_par.stream).map_err(data_err)?;
    let (stream_perp, stream_par) = read_streams(&path_perp, &path_par)?;

    let cond_perp = analysis::condition_on_herald(&stream_perp);
    let cond_par = analysis::condition_on_herald(&stream_par);
    let settings = &resolved.analysis;
    let hist_perp =
        analysis::build_cross_correlation(&cond_perp, settings.dn_range, settings.bin_width_ps)
            .map_err(data_err)?;
    let hist_par =
        analysis::build_cross_correlation(&cond_par, settings.dn_range, settings.bin_width_ps)
            .map_err(data_err)?;
    let estimate = analysis::estimate_coalescence(&hist_perp, &hist_par).map_err(data_err)?;
    let pc_ref = model.coalescence_probability();
    rows.push(row(
        "stream_p_c_estimate",
        format!("within 2 sigma of the analytic {pc_ref:.4}"),
        estimate.value,
        pc_ref - 2.0 * estimate.sigma,
        pc_ref + 2.0 * estimate.sigma,
    ));

    for (name, params, hist) in [
        ("zero_peak_chi2_perp", &params_perp, &hist_perp),
        ("zero_peak_chi2_par", &params_par, &hist_par),
    ] {
        let expected =
            mc::expected_zero_bin_counts(params, model, settings.bin_width_ps, hist.k_max)
                .map_err(data_err)?;
        let (chi2, used) =
            analysis::chi_square_against_expected(hist, 0, &expected, 10.0).map_err(data_err)?;
        rows.push(row(name, "chi2/dof in [0.5 .. 2]", chi2 / used as f64, 0.5, 2.0));
    }

    // Emitter autocorrelation with the second-photon weight calibrated to
    // the published zero-peak ratio.
    let mut params_hbt = resolved.params;
    params_hbt.n_trials = 10_000_000;
    params_hbt.seed = 1012;
    params_hbt.p_qd2 = mc::calibrate_p_qd2(0.165, &params_hbt).map_err(data_err)?;
    let sim_hbt = mc::run_hbt_simulation(&params_hbt, &model.wp_qd, threads).map_err(data_err)?;
    let hist_hbt =
        analysis::build_cross_correlation(&sim_hbt.stream, settings.dn_range, settings.bin_width_ps)
            .map_err(data_err)?;
    let hbt_ratio = analysis::zero_side_ratio(&hist_hbt)
        .map_err(data_err)?
        .ok_or_else(|| AppError::Data("autocorrelation range holds no side peaks".into()))?;
    rows.push(row("autocorrelation_zero_ratio", "0.165 +/- 0.015", hbt_ratio, 0.15, 0.18));
    rows.push(row("autocorrelation_below_half", "below half the side mean", hbt_ratio, 0.0, 0.5));

    // Unheralded operation on the same physics: rare heralds, same sources.
    let mut params_unh_perp = resolved.params;
    params_unh_perp.n_trials = 2_000_000;
    params_unh_perp.p_herald = 0.005;
    params_unh_perp.p_qd2 = params_hbt.p_qd2;
    params_unh_perp.seed = 1013;
    params_unh_perp.polarization = Polarization::Perpendicular;
    let mut params_unh_par = params_unh_perp;
    params_unh_par.seed = 1014;
    params_unh_par.polarization = Polarization::Parallel;
    let sim_unh_perp =
        mc::run_hom_simulation(&params_unh_perp, model, threads).map_err(data_err)?;
    let sim_unh_par = mc::run_hom_simulation(&params_unh_par, model, threads).map_err(data_err)?;
    let unh = analysis::unheralded_analysis(
        &sim_unh_perp.stream,
        &sim_unh_par.stream,
        settings.dn_range,
        settings.bin_width_ps,
    )
    .map_err(data_err)?;
    let heralded_same_physics = {
        let epsilon_equiv = params_unh_perp.p_qd2
            * (1.0 / params_unh_perp.p_qd + 1.0 / params_unh_perp.p_pdc_given_herald);
        let mut d = ConfigDocument::default();
        d.sources.epsilon = Some(epsilon_equiv);
        d.model.detector_fwhm_ns = Some(0.0);
        d.resolve()?.model.coalescence_probability()
    };
    rows.push(row(
        "unheralded_vs_heralded",
        format!("below the heralded {heralded_same_physics:.4}"),
        unh.estimate.value - heralded_same_physics,
        -1.0,
        0.0,
    ));
    rows.push(row(
        "unheralded_zero_side_ratio",
        "near-zero peaks suppressed (below 0.5)",
        unh.zero_side_ratio_perp.unwrap_or(f64::NAN),
        0.0,
        0.5,
    ));

    // Parameter recovery from synthetic spectra and decays.
    let fit_qd = fit::fit_lorentzian(&synthetic_spectrum(qd_linewidth, 1015)).map_err(data_err)?;
    rows.push(row(
        "fit_qd_linewidth_ghz",
        "1.1 +/- 0.1 GHz",
        fit_qd.param("fwhm").map(|p| p.value).unwrap_or(f64::NAN),
        1.0,
        1.2,
    ));
    let fit_filter =
        fit::fit_lorentzian(&synthetic_spectrum(filter_linewidth, 1016)).map_err(data_err)?;
    rows.push(row(
        "fit_filter_linewidth_ghz",
        "0.9 +/- 0.1 GHz",
        fit_filter.param("fwhm").map(|p| p.value).unwrap_or(f64::NAN),
        0.8,
        1.0,
    ));
    let fit_lifetime = fit::fit_exp_gauss(
        &synthetic_decay(0.83, 0.4, 1017),
        DetectorResponse::Known(0.4),
    )
    .map_err(data_err)?;
    rows.push(row(
        "fit_qd_lifetime_ns",
        "0.83 +/- 0.04 ns",
        fit_lifetime.param("lifetime").map(|p| p.value).unwrap_or(f64::NAN),
        0.79,
        0.87,
    ));

    // Count-rate anchor: same-trial emitter presence at half the heralded
    // source presence, from the perpendicular run's bookkeeping.
    let z = sim_perp.stats.herald_ratio_z(0.5).unwrap_or(f64::NAN);
    rows.push(row("herald_rate_anchor_z", "|z| below 3", z, -3.0, 3.0));

    // Emit the table: stdout, CSV, JSON.
    let rows_total = rows.len();
    let rows_passed = rows.iter().filter(|r| r.pass).count();
    let all_pass = rows_passed == rows_total;
    let mut table = format!(
        "{:<32} {:>13} {:>27} {:>6}   reference\n",
        "row", "computed", "bounds", "status"
    );
    for r in &rows {
        table.push_str(&format!(
            "{:<32} {:>13.6} [{:>11.6}, {:>11.6}] {:>6}   {}\n",
            r.name,
            r.computed,
            r.lo,
            r.hi,
            if r.pass { "PASS" } else { "FAIL" },
            r.anchor
        ));
    }
    table.push_str(&format!("{rows_passed} of {rows_total} rows pass"));
    emit(&table);

    let mut csv = String::from("name,anchor,computed,lo,hi,pass\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name, r.anchor, r.computed, r.lo, r.hi, r.pass
        ));
    }
    std::fs::write(out_dir.join("report.csv"), csv).map_err(data_err)?;
    let report = Report { rows, rows_total, rows_passed, all_pass };
    write_json(Some(&out_dir.join("report.json")), &report)?;

    if all_pass {
        Ok(())
    } else {
        Err(AppError::Comparison(format!(
            "{} of {rows_total} reference rows outside tolerance",
            rows_total - rows_passed
        )))
    }
}
