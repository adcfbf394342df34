//! Time-tag stream persistence: a compact binary format and a
//! human-readable CSV format, with validating streaming readers.
//!
//! Binary layout: a fixed 64-byte header, then 16-byte little-endian
//! records `(u64 trial_index, u8 channel, 7-byte signed time_ps)`.
//! CSV layout: `#key=value` header lines, a column header, then
//! `trial_index,channel,time_ps` rows.
//! Times are intra-trial picosecond integers relative to the pump pulse;
//! integers avoid float-accumulation drift over very long acquisitions.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write as IoWrite};
use std::path::{Path, PathBuf};

pub const CHANNEL_HERALD: u8 = 0;
pub const CHANNEL_OUT1: u8 = 1;
pub const CHANNEL_OUT2: u8 = 2;

const MAGIC: &[u8; 8] = b"TAGSTRM1";
const HEADER_LEN: usize = 64;
const RECORD_LEN: usize = 16;
const FLAG_SEED_PRESENT: u32 = 1;
/// 7-byte two's-complement payload bound.
const TIME_LIMIT_PS: i64 = 1 << 55;

#[derive(Debug, Clone, PartialEq)]
pub struct TagStreamHeader {
    pub format_version: u32,
    /// Repetition rate in MHz.
    pub rep_rate: f64,
    pub n_trials: u64,
    pub seed: Option<u64>,
    /// Hash of the generating parameter document; all zeros when unknown.
    pub params_digest: [u8; 16],
}

impl TagStreamHeader {
    pub fn new(rep_rate: f64, n_trials: u64, seed: Option<u64>, params_digest: [u8; 16]) -> Self {
        Self { format_version: 1, rep_rate, n_trials, seed, params_digest }
    }

    /// Trial period rounded to integer picoseconds.
    pub fn period_ps(&self) -> i64 {
        (1e6 / self.rep_rate).round() as i64
    }
}

/// One detection: channel 0 is the herald, 1 and 2 the interferometer
/// outputs. `time_ps` is signed; detector jitter can pull a detection
/// slightly before the pump pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestampRecord {
    pub trial_index: u64,
    pub channel: u8,
    pub time_ps: i64,
}

impl TimestampRecord {
    pub fn sort_key(&self) -> (u64, u8, i64) {
        (self.trial_index, self.channel, self.time_ps)
    }
}

/// In-memory stream: header plus records sorted by
/// `(trial_index, channel, time_ps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TagStream {
    pub header: TagStreamHeader,
    pub records: Vec<TimestampRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported stream extension (expected .tags or .csv): {0}")]
    UnknownExtension(PathBuf),
    #[error("not a tag stream (bad magic bytes)")]
    BadMagic,
    #[error("unsupported format version {found} (expected 1)")]
    VersionMismatch { found: u32 },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("corrupt record at {context}: {reason}")]
    CorruptRecord { context: String, reason: String },
    #[error("records not sorted by (trial_index, channel, time_ps); first offense in trial {trial_index}")]
    Unsorted { trial_index: u64 },
    #[error("channel {channel} out of range 0..=2 in trial {trial_index}")]
    ChannelOutOfRange { channel: u8, trial_index: u64 },
    #[error("time {time_ps} ps in trial {trial_index} exceeds the 7-byte record range")]
    TimeUnrepresentable { time_ps: i64, trial_index: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    Binary,
    Csv,
}

pub fn format_for_path(path: &Path) -> Result<StreamFormat, StreamError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tags") => Ok(StreamFormat::Binary),
        Some("csv") => Ok(StreamFormat::Csv),
        _ => Err(StreamError::UnknownExtension(path.to_path_buf())),
    }
}

fn check_record(
    rec: &TimestampRecord,
    prev: &mut Option<(u64, u8, i64)>,
) -> Result<(), StreamError> {
    if rec.channel > CHANNEL_OUT2 {
        return Err(StreamError::ChannelOutOfRange {
            channel: rec.channel,
            trial_index: rec.trial_index,
        });
    }
    if let Some(p) = prev {
        if rec.sort_key() < *p {
            return Err(StreamError::Unsorted { trial_index: rec.trial_index });
        }
    }
    *prev = Some(rec.sort_key());
    Ok(())
}

/// Write a stream to `path`; the format follows the extension
/// (`.tags` binary, `.csv` text). Unsorted input is rejected.
pub fn write_stream(path: &Path, stream: &TagStream) -> Result<(), StreamError> {
    let format = format_for_path(path)?;
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    match format {
        StreamFormat::Binary => write_binary(&mut out, stream)?,
        StreamFormat::Csv => write_csv(&mut out, stream)?,
    }
    out.flush()?;
    Ok(())
}

fn write_binary<W: IoWrite>(out: &mut W, stream: &TagStream) -> Result<(), StreamError> {
    let h = &stream.header;
    let mut header = [0u8; HEADER_LEN];
    header[0..8].copy_from_slice(MAGIC);
    header[8..12].copy_from_slice(&h.format_version.to_le_bytes());
    let flags: u32 = if h.seed.is_some() { FLAG_SEED_PRESENT } else { 0 };
    header[12..16].copy_from_slice(&flags.to_le_bytes());
    header[16..24].copy_from_slice(&h.rep_rate.to_le_bytes());
    header[24..32].copy_from_slice(&h.n_trials.to_le_bytes());
    header[32..40].copy_from_slice(&h.seed.unwrap_or(0).to_le_bytes());
    header[40..56].copy_from_slice(&h.params_digest);
    out.write_all(&header)?;

    let mut prev = None;
    for rec in &stream.records {
        check_record(rec, &mut prev)?;
        if rec.time_ps <= -TIME_LIMIT_PS || rec.time_ps >= TIME_LIMIT_PS {
            return Err(StreamError::TimeUnrepresentable {
                time_ps: rec.time_ps,
                trial_index: rec.trial_index,
            });
        }
        let mut buf = [0u8; RECORD_LEN];
        buf[0..8].copy_from_slice(&rec.trial_index.to_le_bytes());
        buf[8] = rec.channel;
        buf[9..16].copy_from_slice(&rec.time_ps.to_le_bytes()[0..7]);
        out.write_all(&buf)?;
    }
    Ok(())
}

fn write_csv<W: IoWrite>(out: &mut W, stream: &TagStream) -> Result<(), StreamError> {
    let h = &stream.header;
    writeln!(out, "#format_version={}", h.format_version)?;
    writeln!(out, "#rep_rate={}", h.rep_rate)?;
    writeln!(out, "#n_trials={}", h.n_trials)?;
    if let Some(seed) = h.seed {
        writeln!(out, "#seed={seed}")?;
    }
    writeln!(out, "#params_digest={}", hex_encode(&h.params_digest))?;
    writeln!(out, "trial_index,channel,time_ps")?;
    let mut prev = None;
    for rec in &stream.records {
        check_record(rec, &mut prev)?;
        writeln!(out, "{},{},{}", rec.trial_index, rec.channel, rec.time_ps)?;
    }
    Ok(())
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode16(s: &str) -> Result<[u8; 16], StreamError> {
    let bad = || StreamError::CorruptHeader(format!("params_digest must be 32 hex chars, got {s:?}"));
    if s.len() != 32 {
        return Err(bad());
    }
    let mut out = [0u8; 16];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16).ok_or_else(bad)?;
        let lo = (chunk[1] as char).to_digit(16).ok_or_else(bad)?;
        out[i] = (hi * 16 + lo) as u8;
    }
    Ok(out)
}

/// Open a stream for reading. Returns the parsed header and a validating
/// record iterator; records are streamed, not buffered in memory.
pub fn read_stream(path: &Path) -> Result<(TagStreamHeader, StreamReader), StreamError> {
    let format = format_for_path(path)?;
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    match format {
        StreamFormat::Binary => {
            let header = read_binary_header(&mut reader)?;
            Ok((header, StreamReader { source: Source::Binary(reader), prev: None, line: 0 }))
        }
        StreamFormat::Csv => {
            let (header, line) = read_csv_header(&mut reader)?;
            Ok((header, StreamReader { source: Source::Csv(reader), prev: None, line }))
        }
    }
}

/// Convenience wrapper collecting the whole stream.
pub fn read_stream_to_end(path: &Path) -> Result<TagStream, StreamError> {
    let (header, reader) = read_stream(path)?;
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok(TagStream { header, records })
}

fn read_binary_header<R: Read>(reader: &mut R) -> Result<TagStreamHeader, StreamError> {
    let mut header = [0u8; HEADER_LEN];
    reader
        .read_exact(&mut header)
        .map_err(|_| StreamError::CorruptHeader("file shorter than the 64-byte header".into()))?;
    if &header[0..8] != MAGIC {
        return Err(StreamError::BadMagic);
    }
    let format_version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if format_version != 1 {
        return Err(StreamError::VersionMismatch { found: format_version });
    }
    let flags = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let rep_rate = f64::from_le_bytes(header[16..24].try_into().unwrap());
    if !(rep_rate > 0.0) {
        return Err(StreamError::CorruptHeader(format!("rep_rate must be positive, got {rep_rate}")));
    }
    let n_trials = u64::from_le_bytes(header[24..32].try_into().unwrap());
    let seed_raw = u64::from_le_bytes(header[32..40].try_into().unwrap());
    let seed = (flags & FLAG_SEED_PRESENT != 0).then_some(seed_raw);
    let mut params_digest = [0u8; 16];
    params_digest.copy_from_slice(&header[40..56]);
    Ok(TagStreamHeader { format_version, rep_rate, n_trials, seed, params_digest })
}

fn read_csv_header<R: BufRead>(reader: &mut R) -> Result<(TagStreamHeader, u64), StreamError> {
    let mut version = None;
    let mut rep_rate = None;
    let mut n_trials = None;
    let mut seed = None;
    let mut digest = None;
    let mut line_no = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(StreamError::CorruptHeader("missing column header line".into()));
        }
        line_no += 1;
        let trimmed = line.trim_end();
        if let Some(kv) = trimmed.strip_prefix('#') {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| StreamError::CorruptHeader(format!("malformed header line {trimmed:?}")))?;
            let parse_u64 = |v: &str, k: &str| {
                v.parse::<u64>()
                    .map_err(|_| StreamError::CorruptHeader(format!("bad integer for {k}: {v:?}")))
            };
            match key {
                "format_version" => version = Some(parse_u64(value, key)? as u32),
                "rep_rate" => {
                    let v: f64 = value.parse().map_err(|_| {
                        StreamError::CorruptHeader(format!("bad number for rep_rate: {value:?}"))
                    })?;
                    rep_rate = Some(v);
                }
                "n_trials" => n_trials = Some(parse_u64(value, key)?),
                "seed" => seed = Some(parse_u64(value, key)?),
                "params_digest" => digest = Some(hex_decode16(value)?),
                other => {
                    return Err(StreamError::CorruptHeader(format!("unknown header key {other:?}")))
                }
            }
        } else if trimmed == "trial_index,channel,time_ps" {
            break;
        } else {
            return Err(StreamError::CorruptHeader(format!(
                "expected column header line, got {trimmed:?}"
            )));
        }
    }
    let format_version =
        version.ok_or_else(|| StreamError::CorruptHeader("missing format_version".into()))?;
    if format_version != 1 {
        return Err(StreamError::VersionMismatch { found: format_version });
    }
    let rep_rate = rep_rate.ok_or_else(|| StreamError::CorruptHeader("missing rep_rate".into()))?;
    if !(rep_rate > 0.0) {
        return Err(StreamError::CorruptHeader(format!("rep_rate must be positive, got {rep_rate}")));
    }
    let n_trials = n_trials.ok_or_else(|| StreamError::CorruptHeader("missing n_trials".into()))?;
    let params_digest =
        digest.ok_or_else(|| StreamError::CorruptHeader("missing params_digest".into()))?;
    Ok((TagStreamHeader { format_version, rep_rate, n_trials, seed, params_digest }, line_no))
}

enum Source {
    Binary(BufReader<File>),
    Csv(BufReader<File>),
}

/// Streaming record iterator; validates channel range and sort order as it
/// goes and reports the trial index of the first offense.
pub struct StreamReader {
    source: Source,
    prev: Option<(u64, u8, i64)>,
    line: u64,
}

impl StreamReader {
    fn next_binary(reader: &mut BufReader<File>) -> Option<Result<TimestampRecord, StreamError>> {
        let mut buf = [0u8; RECORD_LEN];
        let mut filled = 0;
        while filled < RECORD_LEN {
            match reader.read(&mut buf[filled..]) {
                Ok(0) => {
                    return if filled == 0 {
                        None
                    } else {
                        Some(Err(StreamError::CorruptRecord {
                            context: "end of file".into(),
                            reason: format!("trailing {filled} bytes, record needs {RECORD_LEN}"),
                        }))
                    }
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Some(Err(e.into())),
            }
        }
        let trial_index = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let channel = buf[8];
        let mut time_bytes = [0u8; 8];
        time_bytes[0..7].copy_from_slice(&buf[9..16]);
        // Sign-extend the 56-bit payload.
        time_bytes[7] = if buf[15] & 0x80 != 0 { 0xff } else { 0 };
        let time_ps = i64::from_le_bytes(time_bytes);
        Some(Ok(TimestampRecord { trial_index, channel, time_ps }))
    }

    fn next_csv(
        reader: &mut BufReader<File>,
        line_no: &mut u64,
    ) -> Option<Result<TimestampRecord, StreamError>> {
        let mut line = String::new();
        loop {
            line.clear();
            match reader.read_line(&mut line) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            *line_no += 1;
            let trimmed = line.trim_end();
            if trimmed.is_empty() {
                continue;
            }
            let corrupt = |reason: String| StreamError::CorruptRecord {
                context: format!("line {line_no}"),
                reason,
            };
            let mut fields = trimmed.split(',');
            let parse = |field: Option<&str>, name: &str| {
                field.ok_or_else(|| corrupt(format!("missing {name}"))).and_then(|v| {
                    v.trim()
                        .parse::<i128>()
                        .map_err(|_| corrupt(format!("bad {name}: {v:?}")))
                })
            };
            let trial = match parse(fields.next(), "trial_index") {
                Ok(v) => v,
                Err(e) => return Some(Err(e)),
            };
            let channel = match parse(fields.next(), "channel") {
                Ok(v) => v,
                Err(e) => return Some(Err(e)),
            };
            let time = match parse(fields.next(), "time_ps") {
                Ok(v) => v,
                Err(e) => return Some(Err(e)),
            };
            if fields.next().is_some() {
                return Some(Err(corrupt("too many fields".into())));
            }
            if !(0..=u64::MAX as i128).contains(&trial) {
                return Some(Err(corrupt(format!("trial_index out of range: {trial}"))));
            }
            if !(0..=255).contains(&channel) {
                return Some(Err(corrupt(format!("channel out of range: {channel}"))));
            }
            if !(i64::MIN as i128..=i64::MAX as i128).contains(&time) {
                return Some(Err(corrupt(format!("time_ps out of range: {time}"))));
            }
            return Some(Ok(TimestampRecord {
                trial_index: trial as u64,
                channel: channel as u8,
                time_ps: time as i64,
            }));
        }
    }
}

impl Iterator for StreamReader {
    type Item = Result<TimestampRecord, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = match &mut self.source {
            Source::Binary(reader) => Self::next_binary(reader),
            Source::Csv(reader) => Self::next_csv(reader, &mut self.line),
        };
        match rec {
            Some(Ok(rec)) => Some(check_record(&rec, &mut self.prev).map(|()| rec)),
            other => other,
        }
    }
}
