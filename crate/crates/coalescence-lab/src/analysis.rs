//! Measurement chain on time-tag streams: herald conditioning and trial
//! renumbering, trial-difference-resolved cross-correlation histograms,
//! autocorrelation, peak areas, coalescence estimators with counting
//! uncertainties, and temporal gating.

use crate::tagstream::{TagStream, TimestampRecord, CHANNEL_HERALD, CHANNEL_OUT1, CHANNEL_OUT2};
use serde::Serialize;
use std::io::Write as IoWrite;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("bin width must be positive, got {0} ps")]
    NonPositiveBinWidth(i64),
    #[error("bin width {bin_width} ps exceeds the half-period {half_period} ps; no central bin fits")]
    BinWidthTooWide { bin_width: i64, half_period: i64 },
    #[error("trial-difference range ({0}, {1}) is empty")]
    EmptyDnRange(i64, i64),
    #[error("trial difference {dn} outside histogram range ({lo}, {hi})")]
    DnOutOfRange { dn: i64, lo: i64, hi: i64 },
    #[error("histogram geometry mismatch ({0} vs {1}); rebuild with matching settings")]
    GeometryMismatch(i64, i64),
    #[error("perpendicular area is zero; coalescence ratio undefined")]
    ZeroPerpendicularArea,
    #[error("empty center bin in the perpendicular histogram; zero-delay ratio undefined")]
    EmptyCenterBin,
    #[error("gate window must be positive, got {0} ns")]
    NonPositiveWindow(f64),
    #[error("streams have different repetition rates ({0} vs {1} MHz)")]
    RepRateMismatch(f64, f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Trial-difference-resolved coincidence histogram. For each Δn in
/// `dn_range` there are `2*k_max + 1` bins of `bin_width` ps; bin k covers
/// τ ∈ [k·w − w/2, k·w + w/2). The binned span is the largest symmetric
/// window fitting inside ±period/2; pairs in the sub-bin residual at the
/// edges are tallied in `discarded_pairs`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorrelationHistogram {
    pub dn_range: (i64, i64),
    pub bin_width: i64,
    pub k_max: i64,
    pub period_ps: i64,
    pub counts: Vec<u64>,
    pub total_heralded_trials: u64,
    pub total_pairs: u64,
    pub discarded_pairs: u64,
}

impl CorrelationHistogram {
    pub fn bins_per_dn(&self) -> usize {
        (2 * self.k_max + 1) as usize
    }

    pub fn tau_center_ps(&self, k: i64) -> i64 {
        k * self.bin_width
    }

    fn check_dn(&self, dn: i64) -> Result<usize, AnalysisError> {
        let (lo, hi) = self.dn_range;
        if dn < lo || dn > hi {
            return Err(AnalysisError::DnOutOfRange { dn, lo, hi });
        }
        Ok((dn - lo) as usize)
    }

    pub fn dn_slice(&self, dn: i64) -> Result<&[u64], AnalysisError> {
        let row = self.check_dn(dn)?;
        let width = self.bins_per_dn();
        Ok(&self.counts[row * width..(row + 1) * width])
    }

    pub fn count(&self, dn: i64, k: i64) -> Result<u64, AnalysisError> {
        let slice = self.dn_slice(dn)?;
        assert!(k.unsigned_abs() as usize <= self.k_max as usize, "bin index out of range");
        Ok(slice[(k + self.k_max) as usize])
    }

    /// Peak area normalized by the number of contributing trial pairs,
    /// `N - |Δn|` for N consecutively numbered trials; comparable across
    /// Δn. None when no trial pairs contribute.
    pub fn normalized_peak(&self, dn: i64) -> Result<Option<f64>, AnalysisError> {
        let area = peak_area(self, dn, None)? as f64;
        let n = self.total_heralded_trials as i64;
        let pairs = n - dn.abs();
        Ok((pairs > 0).then(|| area / pairs as f64))
    }
}

/// Ratio estimate with a 1-sigma counting uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoalescenceEstimate {
    pub value: f64,
    pub sigma: f64,
}

/// Drop trials without a channel-0 record and renumber the survivors
/// consecutively from 1; channel-1/2 records keep their times. Applying
/// it twice equals applying it once.
pub fn condition_on_herald(stream: &TagStream) -> TagStream {
    let mut records = Vec::new();
    let mut kept_trials = 0u64;
    let mut i = 0;
    let recs = &stream.records;
    while i < recs.len() {
        let trial = recs[i].trial_index;
        let mut j = i;
        while j < recs.len() && recs[j].trial_index == trial {
            j += 1;
        }
        // Records are sorted by channel within the trial, so a herald, if
        // present, is first.
        if recs[i].channel == CHANNEL_HERALD {
            kept_trials += 1;
            for rec in &recs[i..j] {
                records.push(TimestampRecord { trial_index: kept_trials, ..*rec });
            }
        }
        i = j;
    }
    let mut header = stream.header.clone();
    header.n_trials = kept_trials;
    TagStream { header, records }
}

fn channel_events(stream: &TagStream, channel: u8) -> Vec<(u64, i64)> {
    stream
        .records
        .iter()
        .filter(|r| r.channel == channel)
        .map(|r| (r.trial_index, r.time_ps))
        .collect()
}

/// Group boundaries of a trial-sorted event list: (trial, start, end).
fn trial_groups(events: &[(u64, i64)]) -> Vec<(u64, usize, usize)> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let trial = events[i].0;
        let mut j = i;
        while j < events.len() && events[j].0 == trial {
            j += 1;
        }
        groups.push((trial, i, j));
        i = j;
    }
    groups
}

/// Exhaustive channel-1 x channel-2 pairing by trial difference:
/// for every pair with m − l in `dn_range`, bin Δn = m − l and
/// τ = t₂,ₘ − t₁,ₗ. Use on a herald-conditioned stream for the heralded
/// analysis or on a raw stream for the unheralded one.
pub fn build_cross_correlation(
    stream: &TagStream,
    dn_range: (i64, i64),
    bin_width: i64,
) -> Result<CorrelationHistogram, AnalysisError> {
    if bin_width <= 0 {
        return Err(AnalysisError::NonPositiveBinWidth(bin_width));
    }
    let period_ps = stream.header.period_ps();
    let half_period = period_ps / 2;
    if bin_width > half_period {
        return Err(AnalysisError::BinWidthTooWide { bin_width, half_period });
    }
    let (dn_lo, dn_hi) = dn_range;
    if dn_lo > dn_hi {
        return Err(AnalysisError::EmptyDnRange(dn_lo, dn_hi));
    }
    let k_max = (period_ps - bin_width) / (2 * bin_width);

    let ch1 = channel_events(stream, CHANNEL_OUT1);
    let ch2 = channel_events(stream, CHANNEL_OUT2);
    let groups1 = trial_groups(&ch1);
    let groups2 = trial_groups(&ch2);

    let n_dn = (dn_hi - dn_lo + 1) as usize;
    let bins_per_dn = (2 * k_max + 1) as usize;
    let mut counts = vec![0u64; n_dn * bins_per_dn];
    let mut total_pairs = 0u64;
    let mut discarded_pairs = 0u64;

    for dn in dn_lo..=dn_hi {
        let row = (dn - dn_lo) as usize;
        // Merge-join the two group lists on m = l + dn.
        let (mut i1, mut i2) = (0usize, 0usize);
        while i1 < groups1.len() && i2 < groups2.len() {
            let (l, s1, e1) = groups1[i1];
            let (m, s2, e2) = groups2[i2];
            let target = l as i64 + dn;
            if (m as i64) < target {
                i2 += 1;
            } else if (m as i64) > target {
                i1 += 1;
            } else {
                for &(_, t1) in &ch1[s1..e1] {
                    for &(_, t2) in &ch2[s2..e2] {
                        let tau = t2 - t1;
                        let k = (2 * tau + bin_width).div_euclid(2 * bin_width);
                        if k.abs() <= k_max {
                            counts[row * bins_per_dn + (k + k_max) as usize] += 1;
                            total_pairs += 1;
                        } else {
                            discarded_pairs += 1;
                        }
                    }
                }
                i1 += 1;
                i2 += 1;
            }
        }
    }

    Ok(CorrelationHistogram {
        dn_range,
        bin_width,
        k_max,
        period_ps,
        counts,
        total_heralded_trials: stream.header.n_trials,
        total_pairs,
        discarded_pairs,
    })
}

/// Unconditioned channel-1 x channel-2 pairing by trial difference, for
/// beam-splitter autocorrelation streams.
pub fn autocorrelation(
    stream: &TagStream,
    dn_range: (i64, i64),
    bin_width: i64,
) -> Result<CorrelationHistogram, AnalysisError> {
    build_cross_correlation(stream, dn_range, bin_width)
}

/// Sum of counts at trial difference `dn` with |τ| within `tau_window_ps`
/// of zero (bin centers compared exclusively); None sums the full binned
/// half-period span.
pub fn peak_area(
    hist: &CorrelationHistogram,
    dn: i64,
    tau_window_ps: Option<i64>,
) -> Result<u64, AnalysisError> {
    let slice = hist.dn_slice(dn)?;
    match tau_window_ps {
        None => Ok(slice.iter().sum()),
        Some(window) => {
            let mut total = 0u64;
            for (idx, &count) in slice.iter().enumerate() {
                let k = idx as i64 - hist.k_max;
                if (hist.tau_center_ps(k)).abs() < window {
                    total += count;
                }
            }
            Ok(total)
        }
    }
}

fn ratio_estimate(area_perp: u64, area_par: u64) -> Result<CoalescenceEstimate, AnalysisError> {
    if area_perp == 0 {
        return Err(AnalysisError::ZeroPerpendicularArea);
    }
    let a_perp = area_perp as f64;
    let a_par = area_par as f64;
    let value = (a_perp - a_par) / a_perp;
    // First-order propagation of independent Poisson errors; a zero
    // parallel count still carries ~1 count of uncertainty.
    let a_par_eff = a_par.max(1.0);
    let sigma = (a_par_eff * (a_perp + a_par_eff) / a_perp.powi(3)).sqrt();
    Ok(CoalescenceEstimate { value, sigma })
}

fn check_geometry(
    hist_perp: &CorrelationHistogram,
    hist_par: &CorrelationHistogram,
) -> Result<(), AnalysisError> {
    if hist_perp.bin_width != hist_par.bin_width || hist_perp.k_max != hist_par.k_max {
        return Err(AnalysisError::GeometryMismatch(hist_perp.bin_width, hist_par.bin_width));
    }
    Ok(())
}

/// Coalescence probability from the Δn = 0 peak areas of two equally
/// sized acquisitions: value = (A⊥ − A∥)/A⊥ with Poisson uncertainty
/// σ² = A∥(A⊥ + A∥)/A⊥³.
pub fn estimate_coalescence(
    hist_perp: &CorrelationHistogram,
    hist_par: &CorrelationHistogram,
) -> Result<CoalescenceEstimate, AnalysisError> {
    check_geometry(hist_perp, hist_par)?;
    ratio_estimate(peak_area(hist_perp, 0, None)?, peak_area(hist_par, 0, None)?)
}

/// Zero-delay (post-selective) coalescence from the central τ bins; the
/// window defaults to a single histogram bin.
pub fn estimate_zero_coalescence(
    hist_perp: &CorrelationHistogram,
    hist_par: &CorrelationHistogram,
    center_bin_width_ps: Option<i64>,
) -> Result<CoalescenceEstimate, AnalysisError> {
    check_geometry(hist_perp, hist_par)?;
    let width = center_bin_width_ps.unwrap_or(hist_perp.bin_width);
    if width <= 0 {
        return Err(AnalysisError::NonPositiveBinWidth(width));
    }
    let window = width / 2 + 1; // exclusive comparison on bin centers
    let perp = peak_area(hist_perp, 0, Some(window))?;
    let par = peak_area(hist_par, 0, Some(window))?;
    if perp == 0 {
        return Err(AnalysisError::EmptyCenterBin);
    }
    ratio_estimate(perp, par)
}

/// Same-trial channel-1 x channel-2 pair count with both times inside
/// [0, window]; `window = None` counts ungated pairs.
fn zero_peak_pairs(stream: &TagStream, window_ps: Option<i64>) -> u64 {
    let keep = |t: i64| window_ps.is_none_or(|w| (0..=w).contains(&t));
    let mut total = 0u64;
    let recs = &stream.records;
    let mut i = 0;
    while i < recs.len() {
        let trial = recs[i].trial_index;
        let mut j = i;
        let (mut n1, mut n2) = (0u64, 0u64);
        while j < recs.len() && recs[j].trial_index == trial {
            match recs[j].channel {
                CHANNEL_OUT1 if keep(recs[j].time_ps) => n1 += 1,
                CHANNEL_OUT2 if keep(recs[j].time_ps) => n2 += 1,
                _ => {}
            }
            j += 1;
        }
        total += n1 * n2;
        i = j;
    }
    total
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GatedEstimate {
    pub window_ns: f64,
    pub estimate: CoalescenceEstimate,
    /// Gated perpendicular area over the ungated one.
    pub retention: f64,
}

/// Recompute the coalescence probability keeping only channel-1/2 records
/// with recorded time inside [0, w]. Gating acts on the times carried by
/// the stream: emission times for jitter-free simulated streams, detection
/// times otherwise.
pub fn gated_estimate(
    stream_perp: &TagStream,
    stream_par: &TagStream,
    window_ns: f64,
) -> Result<GatedEstimate, AnalysisError> {
    if !(window_ns > 0.0) {
        return Err(AnalysisError::NonPositiveWindow(window_ns));
    }
    if stream_perp.header.rep_rate != stream_par.header.rep_rate {
        return Err(AnalysisError::RepRateMismatch(
            stream_perp.header.rep_rate,
            stream_par.header.rep_rate,
        ));
    }
    let window_ps = (window_ns * 1000.0).round() as i64;
    let perp_gated = zero_peak_pairs(stream_perp, Some(window_ps));
    let par_gated = zero_peak_pairs(stream_par, Some(window_ps));
    let perp_total = zero_peak_pairs(stream_perp, None);
    if perp_total == 0 {
        return Err(AnalysisError::ZeroPerpendicularArea);
    }
    Ok(GatedEstimate {
        window_ns,
        estimate: ratio_estimate(perp_gated, par_gated)?,
        retention: perp_gated as f64 / perp_total as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct UnheraldedReport {
    pub hist_perp: CorrelationHistogram,
    pub hist_par: CorrelationHistogram,
    pub estimate: CoalescenceEstimate,
    pub zero_estimate: CoalescenceEstimate,
    /// Zero-peak to mean-side-peak area ratios (trial-pair normalized);
    /// values below 1 mirror the emitter autocorrelation suppression.
    pub zero_side_ratio_perp: Option<f64>,
    pub zero_side_ratio_par: Option<f64>,
}

/// Normalized zero-peak area over the mean normalized side-peak area;
/// None when the range holds no side peaks. Values below 1 quantify
/// same-trial suppression (autocorrelation antibunching or coalescence).
pub fn zero_side_ratio(hist: &CorrelationHistogram) -> Result<Option<f64>, AnalysisError> {
    let Some(zero) = hist.normalized_peak(0)? else { return Ok(None) };
    let mut side = Vec::new();
    for dn in hist.dn_range.0..=hist.dn_range.1 {
        if dn != 0 {
            if let Some(peak) = hist.normalized_peak(dn)? {
                side.push(peak);
            }
        }
    }
    if side.is_empty() {
        return Ok(None);
    }
    let mean = side.iter().sum::<f64>() / side.len() as f64;
    Ok((mean > 0.0).then_some(zero / mean))
}

/// Cross-correlation analysis without herald conditioning, on raw streams
/// of both polarizations.
pub fn unheralded_analysis(
    stream_perp: &TagStream,
    stream_par: &TagStream,
    dn_range: (i64, i64),
    bin_width: i64,
) -> Result<UnheraldedReport, AnalysisError> {
    if stream_perp.header.rep_rate != stream_par.header.rep_rate {
        return Err(AnalysisError::RepRateMismatch(
            stream_perp.header.rep_rate,
            stream_par.header.rep_rate,
        ));
    }
    let hist_perp = build_cross_correlation(stream_perp, dn_range, bin_width)?;
    let hist_par = build_cross_correlation(stream_par, dn_range, bin_width)?;
    let estimate = estimate_coalescence(&hist_perp, &hist_par)?;
    let zero_estimate = estimate_zero_coalescence(&hist_perp, &hist_par, None)?;
    let zero_side_ratio_perp = zero_side_ratio(&hist_perp)?;
    let zero_side_ratio_par = zero_side_ratio(&hist_par)?;
    Ok(UnheraldedReport {
        hist_perp,
        hist_par,
        estimate,
        zero_estimate,
        zero_side_ratio_perp,
        zero_side_ratio_par,
    })
}

/// Pearson chi-square of one trial-difference slice against expected bin
/// counts, restricted to bins whose expectation is at least `min_expected`
/// (the Poisson-to-chi-square approximation fails on near-empty bins).
/// Returns the statistic and the number of bins used.
pub fn chi_square_against_expected(
    hist: &CorrelationHistogram,
    dn: i64,
    expected: &[f64],
    min_expected: f64,
) -> Result<(f64, usize), AnalysisError> {
    let slice = hist.dn_slice(dn)?;
    if expected.len() != slice.len() {
        return Err(AnalysisError::GeometryMismatch(expected.len() as i64, slice.len() as i64));
    }
    let mut chi2 = 0.0;
    let mut used = 0;
    for (&obs, &exp) in slice.iter().zip(expected) {
        if exp >= min_expected {
            let d = obs as f64 - exp;
            chi2 += d * d / exp;
            used += 1;
        }
    }
    Ok((chi2, used))
}

/// Export a histogram as `dn,tau_ps,count` CSV rows.
pub fn write_histogram_csv(path: &Path, hist: &CorrelationHistogram) -> Result<(), AnalysisError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "dn,tau_ps,count")?;
    for dn in hist.dn_range.0..=hist.dn_range.1 {
        let slice = hist.dn_slice(dn).expect("dn in range");
        for (idx, &count) in slice.iter().enumerate() {
            let k = idx as i64 - hist.k_max;
            writeln!(out, "{},{},{}", dn, hist.tau_center_ps(k), count)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagstream::TagStreamHeader;
    use approx::assert_relative_eq;

    fn digest() -> [u8; 16] {
        [0u8; 16]
    }

    fn stream_from(records: Vec<TimestampRecord>, n_trials: u64) -> TagStream {
        TagStream { header: TagStreamHeader::new(76.0, n_trials, None, digest()), records }
    }

    fn rec(trial_index: u64, channel: u8, time_ps: i64) -> TimestampRecord {
        TimestampRecord { trial_index, channel, time_ps }
    }

    #[test]
    fn herald_conditioning_renumbers_consecutively() {
        // Trials 1 and 3 heralded, trial 2 not: {1 -> 1, 3 -> 2}.
        let stream = stream_from(
            vec![
                rec(1, 0, 0),
                rec(1, 1, 120),
                rec(2, 1, 300),
                rec(3, 0, 0),
                rec(3, 2, 450),
            ],
            3,
        );
        let conditioned = condition_on_herald(&stream);
        assert_eq!(conditioned.header.n_trials, 2);
        assert_eq!(
            conditioned.records,
            vec![rec(1, 0, 0), rec(1, 1, 120), rec(2, 0, 0), rec(2, 2, 450)]
        );

        let twice = condition_on_herald(&conditioned);
        assert_eq!(twice, conditioned, "conditioning must be idempotent");
    }

    #[test]
    fn all_heralded_is_identity_renumbering() {
        let stream = stream_from(vec![rec(1, 0, 0), rec(1, 2, 7), rec(2, 0, 0)], 2);
        let conditioned = condition_on_herald(&stream);
        assert_eq!(conditioned, stream);
    }

    #[test]
    fn worked_pairing_example() {
        // Heralded trials 1..3; output-1 detections in trials 1 and 3,
        // output-2 detections in trials 2 and 3: the trial-1 record pairs
        // at Δn=1 and Δn=2, the trial-3 records pair at Δn=0.
        let stream = stream_from(
            vec![
                rec(1, 0, 0),
                rec(1, 1, 100),
                rec(2, 0, 0),
                rec(2, 2, 350),
                rec(3, 0, 0),
                rec(3, 1, 80),
                rec(3, 2, 160),
            ],
            3,
        );
        let hist = build_cross_correlation(&stream, (0, 2), 64).unwrap();
        assert_eq!(peak_area(&hist, 0, None).unwrap(), 1);
        assert_eq!(peak_area(&hist, 1, None).unwrap(), 1);
        assert_eq!(peak_area(&hist, 2, None).unwrap(), 1);
        assert_eq!(hist.total_pairs, 3);

        // All-pairs semantics: widening the range picks up the trial-3
        // output-1 x trial-2 output-2 pair at Δn=-1.
        let wide = build_cross_correlation(&stream, (-2, 2), 64).unwrap();
        assert_eq!(peak_area(&wide, -1, None).unwrap(), 1);
        assert_eq!(wide.total_pairs, 4);
    }

    #[test]
    fn single_coincidence_lands_in_the_250ps_bin() {
        let stream = stream_from(vec![rec(0, 1, 100), rec(0, 2, 350)], 1);
        let hist = build_cross_correlation(&stream, (0, 0), 64).unwrap();
        // τ = +250 ps falls in bin k=4 ([224, 288) ps).
        assert_eq!(hist.count(0, 4).unwrap(), 1);
        assert_eq!(hist.total_pairs, 1);
        assert_eq!(hist.k_max, 102);
        assert_eq!(hist.bins_per_dn(), 205);
    }

    #[test]
    fn count_conservation_is_exact() {
        // Dense synthetic stream with multiple records per trial and
        // τ values beyond the binned span.
        let mut records = Vec::new();
        for trial in 0..50u64 {
            records.push(rec(trial, 1, (trial as i64 * 37) % 6400));
            if trial % 3 == 0 {
                records.push(rec(trial, 1, 6500));
            }
            records.push(rec(trial, 2, -6550 + (trial as i64 * 91) % 13100));
        }
        records.sort_by_key(|r| r.sort_key());
        let stream = stream_from(records.clone(), 50);
        let hist = build_cross_correlation(&stream, (-3, 3), 64).unwrap();

        // Brute-force qualifying pair count.
        let mut qualifying = 0u64;
        for a in &records {
            for b in &records {
                if a.channel == 1 && b.channel == 2 {
                    let dn = b.trial_index as i64 - a.trial_index as i64;
                    if (-3..=3).contains(&dn) {
                        qualifying += 1;
                    }
                }
            }
        }
        assert_eq!(hist.total_pairs + hist.discarded_pairs, qualifying);
        assert_eq!(hist.counts.iter().sum::<u64>(), hist.total_pairs);
        assert!(hist.discarded_pairs > 0, "edge pairs should exercise the residual");
    }

    #[test]
    fn swapping_channels_mirrors_the_histogram() {
        // Times stay off the half-open bin edges (τ = ±32 mod 64), where
        // the mirror identity does not hold by convention.
        let mut records = Vec::new();
        for trial in 0..40u64 {
            records.push(rec(trial, 1, (trial as i64 * 53 % 90) * 64 + 7));
            records.push(rec(trial, 2, (trial as i64 * 29 % 90) * 64 + 13));
        }
        let stream = stream_from(records.clone(), 40);
        let swapped_records: Vec<_> = records
            .iter()
            .map(|r| {
                let channel = match r.channel {
                    CHANNEL_OUT1 => CHANNEL_OUT2,
                    CHANNEL_OUT2 => CHANNEL_OUT1,
                    c => c,
                };
                TimestampRecord { channel, ..*r }
            })
            .collect();
        let mut sorted = swapped_records;
        sorted.sort_by_key(|r| r.sort_key());
        let swapped = stream_from(sorted, 40);

        let hist = build_cross_correlation(&stream, (-4, 4), 64).unwrap();
        let mirror = build_cross_correlation(&swapped, (-4, 4), 64).unwrap();
        for dn in -4..=4 {
            for k in -hist.k_max..=hist.k_max {
                assert_eq!(
                    hist.count(dn, k).unwrap(),
                    mirror.count(-dn, -k).unwrap(),
                    "mismatch at dn={dn}, k={k}"
                );
            }
        }
    }

    #[test]
    fn histogram_parameter_validation() {
        let stream = stream_from(vec![], 0);
        assert!(matches!(
            build_cross_correlation(&stream, (0, 0), 0),
            Err(AnalysisError::NonPositiveBinWidth(0))
        ));
        assert!(matches!(
            build_cross_correlation(&stream, (0, 0), 7000),
            Err(AnalysisError::BinWidthTooWide { .. })
        ));
        assert!(matches!(
            build_cross_correlation(&stream, (2, -2), 64),
            Err(AnalysisError::EmptyDnRange(2, -2))
        ));
        let hist = build_cross_correlation(&stream, (0, 0), 64).unwrap();
        assert!(matches!(
            peak_area(&hist, 1, None),
            Err(AnalysisError::DnOutOfRange { dn: 1, .. })
        ));
    }

    fn synthetic_hist(zero_bin: u64, spread: u64) -> CorrelationHistogram {
        let mut hist = CorrelationHistogram {
            dn_range: (0, 0),
            bin_width: 64,
            k_max: 102,
            period_ps: 13158,
            counts: vec![0; 205],
            total_heralded_trials: 1000,
            total_pairs: 0,
            discarded_pairs: 0,
        };
        hist.counts[102] = zero_bin;
        hist.counts[10] = spread;
        hist.counts[200] = spread;
        hist.total_pairs = zero_bin + 2 * spread;
        hist
    }

    #[test]
    fn estimator_reference_uncertainties() {
        let perp = synthetic_hist(800, 100);
        let par = synthetic_hist(800, 100);
        let est = estimate_coalescence(&perp, &par).unwrap();
        assert_relative_eq!(est.value, 0.0, epsilon = 1e-12);
        // A⊥ = A∥ = 1000: σ = sqrt(1000·2000/1000³).
        assert_relative_eq!(est.sigma, 0.044721359550, max_relative = 1e-9);

        let par_empty = synthetic_hist(0, 0);
        let est = estimate_coalescence(&perp, &par_empty).unwrap();
        assert_relative_eq!(est.value, 1.0, epsilon = 1e-12);
        assert!(est.sigma > 0.0 && est.sigma < 0.002, "sigma {}", est.sigma);

        assert!(matches!(
            estimate_coalescence(&par_empty, &perp),
            Err(AnalysisError::ZeroPerpendicularArea)
        ));

        let coarse = CorrelationHistogram { bin_width: 128, ..synthetic_hist(1, 0) };
        assert!(matches!(
            estimate_coalescence(&perp, &coarse),
            Err(AnalysisError::GeometryMismatch(64, 128))
        ));
    }

    #[test]
    fn zero_delay_estimator_uses_central_bin_only() {
        let perp = synthetic_hist(400, 50);
        let par = synthetic_hist(100, 50);
        let est = estimate_zero_coalescence(&perp, &par, None).unwrap();
        assert_relative_eq!(est.value, (400.0 - 100.0) / 400.0, epsilon = 1e-12);

        // Widening the center window to three bins picks up nothing here
        // because the side counts sit far from τ = 0.
        let wide = estimate_zero_coalescence(&perp, &par, Some(192)).unwrap();
        assert_relative_eq!(wide.value, est.value, epsilon = 1e-12);

        let empty = synthetic_hist(0, 50);
        assert!(matches!(
            estimate_zero_coalescence(&empty, &par, None),
            Err(AnalysisError::EmptyCenterBin)
        ));

        // A parallel zero count of 0 yields the trivial ratio 1.
        let est = estimate_zero_coalescence(&perp, &empty, None).unwrap();
        assert_relative_eq!(est.value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gating_drops_out_of_window_records() {
        // Two heralded trials per stream. Trial 0 pairs inside a 290 ps
        // window; trial 1 pairs only without the gate.
        let perp = stream_from(
            vec![
                rec(0, 1, 100),
                rec(0, 2, 200),
                rec(1, 1, 500),
                rec(1, 2, 120),
            ],
            2,
        );
        let par = stream_from(vec![rec(0, 1, 950), rec(0, 2, 40), rec(1, 2, 80)], 2);

        let gated = gated_estimate(&perp, &par, 0.29).unwrap();
        // Perpendicular: 1 of 2 pairs survives; parallel: none survive.
        assert_relative_eq!(gated.retention, 0.5, epsilon = 1e-12);
        assert_relative_eq!(gated.estimate.value, 1.0, epsilon = 1e-12);

        // A window covering the whole period keeps everything.
        let open = gated_estimate(&perp, &par, 13.0).unwrap();
        assert_relative_eq!(open.retention, 1.0, epsilon = 1e-12);
        assert_relative_eq!(open.estimate.value, 0.5, epsilon = 1e-12);

        assert!(matches!(
            gated_estimate(&perp, &par, 0.0),
            Err(AnalysisError::NonPositiveWindow(_))
        ));
    }

    #[test]
    fn unheralded_report_is_internally_consistent() {
        let mut perp_records = Vec::new();
        let mut par_records = Vec::new();
        for trial in 0..30u64 {
            perp_records.push(rec(trial, 1, (trial as i64 * 61) % 2000));
            perp_records.push(rec(trial, 2, (trial as i64 * 47) % 2600));
            par_records.push(rec(trial, 1, (trial as i64 * 61) % 2000));
            if trial % 2 == 0 {
                par_records.push(rec(trial, 2, (trial as i64 * 83) % 2600));
            }
        }
        let perp = stream_from(perp_records, 30);
        let par = stream_from(par_records, 30);
        let report = unheralded_analysis(&perp, &par, (-3, 3), 64).unwrap();
        let expect = estimate_coalescence(&report.hist_perp, &report.hist_par).unwrap();
        assert_eq!(report.estimate, expect);
        assert!(report.zero_side_ratio_perp.is_some());

        let bad_par = TagStream {
            header: TagStreamHeader::new(80.0, 30, None, digest()),
            records: vec![],
        };
        assert!(matches!(
            unheralded_analysis(&perp, &bad_par, (-3, 3), 64),
            Err(AnalysisError::RepRateMismatch(_, _))
        ));
    }

    #[test]
    fn normalized_peaks_account_for_trial_pair_counts() {
        // One pair per trial difference; 10 trials. The Δn=2 peak has
        // 10-2 = 8 contributing trial pairs.
        let mut records = Vec::new();
        for trial in 0..10u64 {
            records.push(rec(trial, 1, 0));
            records.push(rec(trial, 2, 64));
        }
        let stream = stream_from(records, 10);
        let hist = build_cross_correlation(&stream, (0, 2), 64).unwrap();
        assert_relative_eq!(hist.normalized_peak(0).unwrap().unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(
            hist.normalized_peak(2).unwrap().unwrap(),
            8.0 / 8.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn chi_square_skips_bins_below_the_expectation_floor() {
        let stream = stream_from(vec![rec(0, 1, 100), rec(0, 2, 350)], 1);
        let hist = build_cross_correlation(&stream, (0, 0), 64).unwrap();
        // Expected 16 in the observed bin (count 1), 0.5 everywhere else:
        // only the one bin above the floor contributes.
        let mut expected = vec![0.5; hist.bins_per_dn()];
        expected[(4 + hist.k_max) as usize] = 16.0;
        let (chi2, used) = chi_square_against_expected(&hist, 0, &expected, 10.0).unwrap();
        assert_eq!(used, 1);
        assert_relative_eq!(chi2, 15.0 * 15.0 / 16.0, epsilon = 1e-12);

        let short = vec![1.0; 3];
        assert!(matches!(
            chi_square_against_expected(&hist, 0, &short, 10.0),
            Err(AnalysisError::GeometryMismatch(3, _))
        ));
    }

    #[test]
    fn histogram_csv_has_one_row_per_bin() {
        let dir = tempfile::tempdir().unwrap();
        let stream = stream_from(vec![rec(0, 1, 100), rec(0, 2, 350)], 1);
        let hist = build_cross_correlation(&stream, (-1, 1), 64).unwrap();
        let path = dir.path().join("hist.csv");
        write_histogram_csv(&path, &hist).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dn,tau_ps,count");
        assert_eq!(lines.len(), 1 + 3 * 205);
        assert!(lines.contains(&"0,256,1"), "the τ=250 ps pair lands at center 256");
    }
}
