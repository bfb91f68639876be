//! Progress-log parsing and the early-stop rule for running alignments.
//!
//! The aligner periodically appends one line per reporting interval to its
//! progress log. Each line carries the number of reads processed so far and
//! the running unique/multi mapping percentages. A run whose combined mapping
//! rate stays below a threshold after a minimum share of its reads has been
//! processed is not worth finishing.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SECONDS_PER_DAY: f64 = 86_400.0;

/// One parsed progress-log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressSample {
    pub elapsed_seconds: f64,
    pub reads_processed: u64,
    pub pct_unique_mapped: f64,
    pub pct_multi_mapped: f64,
}

impl ProgressSample {
    pub fn new(
        elapsed_seconds: f64,
        reads_processed: u64,
        pct_unique_mapped: f64,
        pct_multi_mapped: f64,
    ) -> Self {
        Self {
            elapsed_seconds,
            reads_processed,
            pct_unique_mapped,
            pct_multi_mapped,
        }
    }
}

/// Token positions (0-based, after splitting on whitespace runs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    /// `HH:MM:SS` token; `None` leaves `elapsed_seconds` at zero.
    pub clock: Option<usize>,
    pub reads_processed: usize,
    pub unique_mapped: usize,
    pub multi_mapped: usize,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            clock: Some(2),
            reads_processed: 4,
            unique_mapped: 6,
            multi_mapped: 9,
        }
    }
}

impl ColumnMap {
    fn width(&self) -> usize {
        let mut max = self
            .reads_processed
            .max(self.unique_mapped)
            .max(self.multi_mapped);
        if let Some(clock) = self.clock {
            max = max.max(clock);
        }
        max + 1
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProgressParseError {
    #[error("blank line")]
    Blank,
    #[error("truncated line: need {needed} tokens, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("malformed token {token:?} at column {column}")]
    MalformedLine { column: usize, token: String },
    #[error("unique + multi mapped fraction {0} exceeds 1")]
    RateOverflow(f64),
}

/// Parses a percent token. A trailing `%` always means percent; a bare number
/// above 1 is read as a percent, otherwise as a fraction.
pub fn parse_fraction(token: &str) -> Option<f64> {
    let (digits, percent) = match token.strip_suffix('%') {
        Some(rest) => (rest, true),
        None => (token, false),
    };
    let value: f64 = digits.parse().ok()?;
    if !value.is_finite() || value < 0.0 {
        return None;
    }
    let fraction = if percent || value > 1.0 {
        value / 100.0
    } else {
        value
    };
    (fraction <= 1.0).then_some(fraction)
}

fn parse_clock(token: &str) -> Option<f64> {
    let mut parts = token.split(':');
    let h: u32 = parts.next()?.parse().ok()?;
    let m: u32 = parts.next()?.parse().ok()?;
    let s: f64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || h > 23 || m > 59 || !(0.0..60.0).contains(&s) {
        return None;
    }
    Some(f64::from(h * 3600 + m * 60) + s)
}

/// Parses one progress line. On success `elapsed_seconds` holds the
/// time-of-day of the line; [`parse_progress_log`] rebases it.
pub fn parse_progress_line(
    line: &str,
    columns: &ColumnMap,
) -> Result<ProgressSample, ProgressParseError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(ProgressParseError::Blank);
    }
    let needed = columns.width();
    if tokens.len() < needed {
        return Err(ProgressParseError::Truncated {
            needed,
            found: tokens.len(),
        });
    }
    let malformed = |column: usize| ProgressParseError::MalformedLine {
        column,
        token: tokens[column].to_string(),
    };

    let elapsed_seconds = match columns.clock {
        Some(c) => parse_clock(tokens[c]).ok_or_else(|| malformed(c))?,
        None => 0.0,
    };
    let reads_processed: u64 = tokens[columns.reads_processed]
        .parse()
        .map_err(|_| malformed(columns.reads_processed))?;
    let unique = parse_fraction(tokens[columns.unique_mapped])
        .ok_or_else(|| malformed(columns.unique_mapped))?;
    let multi = parse_fraction(tokens[columns.multi_mapped])
        .ok_or_else(|| malformed(columns.multi_mapped))?;
    // Printed percentages are rounded to one decimal, so allow a little slack.
    if unique + multi > 1.0 + 1e-3 {
        return Err(ProgressParseError::RateOverflow(unique + multi));
    }
    Ok(ProgressSample::new(
        elapsed_seconds,
        reads_processed,
        unique,
        multi,
    ))
}

/// Parses a whole log, skipping lines that do not parse, and rebases
/// timestamps so the first sample sits at zero (wrapping over midnight).
pub fn parse_progress_log(text: &str, columns: &ColumnMap) -> Vec<ProgressSample> {
    let mut rebase = Rebase::default();
    text.lines()
        .filter_map(|line| parse_progress_line(line, columns).ok())
        .map(|s| rebase.apply(s))
        .collect()
}

#[derive(Debug, Default)]
struct Rebase {
    origin: Option<f64>,
    last_clock: f64,
    days: f64,
}

impl Rebase {
    fn apply(&mut self, mut sample: ProgressSample) -> ProgressSample {
        let clock = sample.elapsed_seconds;
        match self.origin {
            None => self.origin = Some(clock),
            Some(_) if clock < self.last_clock => self.days += 1.0,
            Some(_) => {}
        }
        self.last_clock = clock;
        sample.elapsed_seconds = clock + self.days * SECONDS_PER_DAY - self.origin.unwrap_or(0.0);
        sample
    }
}

/// Combined unique + multi mapping rate, clamped to `[0, 1]`.
pub fn mapping_rate(sample: &ProgressSample) -> f64 {
    (sample.pct_unique_mapped + sample.pct_multi_mapped).clamp(0.0, 1.0)
}

/// Reads the final mapping rate (unique + multi) from a `Log.final.out` summary.
pub fn parse_final_mapping_rate(text: &str) -> Option<f64> {
    let mut unique = None;
    let mut multi = None;
    for line in text.lines() {
        let Some((key, value)) = line.split_once('|') else {
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        if key == "Uniquely mapped reads %" {
            unique = parse_fraction(value);
        } else if key == "% of reads mapped to multiple loci" {
            multi = parse_fraction(value);
        }
    }
    Some((unique? + multi?).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("minimum processed fraction {0} outside (0, 1]")]
    MinProcessed(f64),
    #[error("poll interval must be positive, got {0}")]
    PollInterval(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopPolicy {
    pub threshold: f64,
    pub min_processed_fraction: f64,
    pub poll_interval_seconds: f64,
}

impl Default for EarlyStopPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.30,
            min_processed_fraction: 0.10,
            poll_interval_seconds: 30.0,
        }
    }
}

impl EarlyStopPolicy {
    pub fn new(
        threshold: f64,
        min_processed_fraction: f64,
        poll_interval_seconds: f64,
    ) -> Result<Self, PolicyError> {
        let policy = Self {
            threshold,
            min_processed_fraction,
            poll_interval_seconds,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PolicyError::Threshold(self.threshold));
        }
        if !(self.min_processed_fraction > 0.0 && self.min_processed_fraction <= 1.0) {
            return Err(PolicyError::MinProcessed(self.min_processed_fraction));
        }
        if !(self.poll_interval_seconds > 0.0 && self.poll_interval_seconds.is_finite()) {
            return Err(PolicyError::PollInterval(self.poll_interval_seconds));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Continue,
    Terminate,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopDecision {
    pub verdict: Verdict,
    pub observed_rate: Option<f64>,
    pub processed_fraction: Option<f64>,
    pub reason: &'static str,
}

impl StopDecision {
    fn indeterminate(observed_rate: Option<f64>, reason: &'static str) -> Self {
        Self {
            verdict: Verdict::Indeterminate,
            observed_rate,
            processed_fraction: None,
            reason,
        }
    }

    pub fn is_terminate(&self) -> bool {
        self.verdict == Verdict::Terminate
    }
}

/// Applies the early-stop rule to one sample. An unknown (or zero) read total
/// never terminates.
pub fn evaluate(
    policy: &EarlyStopPolicy,
    sample: &ProgressSample,
    expected_total_reads: Option<u64>,
) -> StopDecision {
    let rate = mapping_rate(sample);
    let total = match expected_total_reads {
        Some(total) if total > 0 => total,
        _ => return StopDecision::indeterminate(Some(rate), "expected read count unknown"),
    };
    let processed = (sample.reads_processed as f64 / total as f64).min(1.0);
    let (verdict, reason) = if processed < policy.min_processed_fraction {
        (Verdict::Continue, "minimum processed fraction not reached")
    } else if rate < policy.threshold {
        (Verdict::Terminate, "mapping rate below threshold")
    } else {
        (Verdict::Continue, "mapping rate at or above threshold")
    };
    StopDecision {
        verdict,
        observed_rate: Some(rate),
        processed_fraction: Some(processed),
        reason,
    }
}

/// Outcome of supervising one alignment's progress stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Supervision {
    pub decision: StopDecision,
    /// Share of the run's reads consumed before stopping; 1.0 when it ran out.
    pub consumed_fraction: f64,
    /// Elapsed time of the sample that triggered termination.
    pub stopped_at_seconds: Option<f64>,
}

pub fn supervise<'a, I>(
    samples: I,
    policy: &EarlyStopPolicy,
    expected_total_reads: Option<u64>,
) -> Supervision
where
    I: IntoIterator<Item = &'a ProgressSample>,
{
    let mut last = None;
    for sample in samples {
        let decision = evaluate(policy, sample, expected_total_reads);
        if decision.is_terminate() {
            return Supervision {
                consumed_fraction: decision.processed_fraction.unwrap_or(1.0),
                decision,
                stopped_at_seconds: Some(sample.elapsed_seconds),
            };
        }
        last = Some(decision);
    }
    Supervision {
        decision: last.unwrap_or_else(|| StopDecision::indeterminate(None, "no samples")),
        consumed_fraction: 1.0,
        stopped_at_seconds: None,
    }
}

/// Incremental reader for a progress log that is still being written.
/// Only complete lines are returned; a partial trailing line waits for the
/// next poll.
#[derive(Debug)]
pub struct LogTail {
    path: PathBuf,
    offset: u64,
    pending: String,
    columns: ColumnMap,
    rebase: Rebase,
}

impl LogTail {
    pub fn new(path: impl Into<PathBuf>, columns: ColumnMap) -> Self {
        Self {
            path: path.into(),
            offset: 0,
            pending: String::new(),
            columns,
            rebase: Rebase::default(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Returns samples appended since the previous poll. A missing file
    /// yields nothing.
    pub fn poll(&mut self) -> io::Result<Vec<ProgressSample>> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let len = file.metadata()?.len();
        if len < self.offset {
            // truncated or replaced
            self.offset = 0;
            self.pending.clear();
        }
        let mut reader = BufReader::new(file);
        reader.seek(SeekFrom::Start(self.offset))?;
        let mut buf = Vec::new();
        let mut samples = Vec::new();
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                break;
            }
            self.offset += n as u64;
            self.pending.push_str(&String::from_utf8_lossy(&buf));
            if !self.pending.ends_with('\n') {
                break;
            }
            let line = std::mem::take(&mut self.pending);
            if let Ok(sample) = parse_progress_line(&line, &self.columns) {
                samples.push(self.rebase.apply(sample));
            }
        }
        Ok(samples)
    }
}

/// Formats a sample in the default column layout. `clock_origin` is the
/// time-of-day (seconds) that corresponds to `elapsed_seconds == 0`.
pub fn format_progress_line(sample: &ProgressSample, clock_origin: f64) -> String {
    let clock = (clock_origin + sample.elapsed_seconds).rem_euclid(SECONDS_PER_DAY);
    let whole = clock.floor() as u64;
    let (h, m, s) = (whole / 3600, (whole / 60) % 60, whole % 60);
    let speed = if sample.elapsed_seconds > 0.0 {
        sample.reads_processed as f64 / sample.elapsed_seconds * 3600.0 / 1e6
    } else {
        0.0
    };
    let rate = mapping_rate(sample);
    let unmapped = (1.0 - rate).max(0.0) * 100.0;
    format!(
        "Jan 01 {h:02}:{m:02}:{s:02} {speed:>7.1} {reads:>12} {len:>6.1} {uniq:>6.2}% {len:>6.1} {mm:>5.1}% {multi:>6.2}% {zero:>5.1}% {zero:>5.1}% {unm:>6.2}% {zero:>5.1}%",
        reads = sample.reads_processed,
        len = 100.0,
        uniq = sample.pct_unique_mapped * 100.0,
        mm = 0.5,
        multi = sample.pct_multi_mapped * 100.0,
        zero = 0.0,
        unm = unmapped,
    )
}

pub const PROGRESS_HEADER: &str = "           Time    Speed        Read     Read   Mapped   Mapped   Mapped   Mapped Unmapped Unmapped Unmapped Unmapped\n                    M/hr      number   length   unique   length   MMrate    multi   multi+       MM    short    other";

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const FIXTURE: &str =
        "Mar 26 10:31:23  86.6  1443455  95.0  80.3%  94.5  0.5%  13.2%  0.0%  0.0%  5.3%  1.2%";

    #[test]
    fn parses_fixture_line() {
        let s = parse_progress_line(FIXTURE, &ColumnMap::default()).unwrap();
        assert_eq!(s.reads_processed, 1_443_455);
        assert_relative_eq!(s.pct_unique_mapped, 0.803, epsilon = 1e-12);
        assert_relative_eq!(s.pct_multi_mapped, 0.132, epsilon = 1e-12);
        assert_relative_eq!(s.elapsed_seconds, 10.0 * 3600.0 + 31.0 * 60.0 + 23.0);
        assert_relative_eq!(mapping_rate(&s), 0.935, epsilon = 1e-12);
    }

    #[test]
    fn header_and_blank_lines_fail() {
        let cols = ColumnMap::default();
        assert!(parse_progress_line("           Time    Speed        Read ...", &cols).is_err());
        for header in PROGRESS_HEADER.lines() {
            assert!(parse_progress_line(header, &cols).is_err());
        }
        assert_eq!(parse_progress_line("   ", &cols), Err(ProgressParseError::Blank));
        assert!(matches!(
            parse_progress_line("ALL DONE!", &cols),
            Err(ProgressParseError::Truncated { .. })
        ));
    }

    #[test]
    fn all_zero_line() {
        let line = "Mar 26 10:31:23  86.6  0  95.0  0.0%  0.0  0.0%  0.0%  0.0%  0.0%  0.0%  0.0%";
        let s = parse_progress_line(line, &ColumnMap::default()).unwrap();
        assert_eq!(s.reads_processed, 0);
        assert_eq!(mapping_rate(&s), 0.0);
    }

    #[test]
    fn non_numeric_mapped_token_is_malformed() {
        let line = FIXTURE.replace("80.3%", "abc%");
        assert_eq!(
            parse_progress_line(&line, &ColumnMap::default()),
            Err(ProgressParseError::MalformedLine {
                column: 6,
                token: "abc%".into()
            })
        );
    }

    #[test]
    fn fraction_forms() {
        for token in ["80.3%", "0.803", "80.3"] {
            assert_relative_eq!(parse_fraction(token).unwrap(), 0.803, epsilon = 1e-12);
        }
        assert_eq!(parse_fraction("1"), Some(1.0));
        assert_eq!(parse_fraction("100%"), Some(1.0));
        assert_eq!(parse_fraction("101%"), None);
        assert_eq!(parse_fraction("-1"), None);
        assert_eq!(parse_fraction("NaN"), None);
    }

    #[test]
    fn custom_column_map() {
        let cols = ColumnMap {
            clock: None,
            reads_processed: 0,
            unique_mapped: 1,
            multi_mapped: 2,
        };
        let s = parse_progress_line("500 0.5 0.25", &cols).unwrap();
        assert_eq!(s.reads_processed, 500);
        assert_eq!(s.elapsed_seconds, 0.0);
        assert_relative_eq!(mapping_rate(&s), 0.75);
    }

    #[test]
    fn mapping_rate_examples() {
        let s = |u, m| ProgressSample::new(0.0, 0, u, m);
        assert_relative_eq!(mapping_rate(&s(0.803, 0.132)), 0.935, epsilon = 1e-12);
        assert_eq!(mapping_rate(&s(0.0, 0.0)), 0.0);
        assert_eq!(mapping_rate(&s(1.0, 0.0)), 1.0);
        assert_eq!(mapping_rate(&s(0.7, 0.5)), 1.0);
    }

    fn sample_at(processed_pct: u64, rate: f64) -> ProgressSample {
        ProgressSample::new(processed_pct as f64, processed_pct * 10, rate, 0.0)
    }

    #[test]
    fn evaluate_examples() {
        let p = EarlyStopPolicy::default();
        assert_eq!(evaluate(&p, &sample_at(12, 0.25), Some(1000)).verdict, Verdict::Terminate);
        assert_eq!(evaluate(&p, &sample_at(5, 0.25), Some(1000)).verdict, Verdict::Continue);
        assert_eq!(evaluate(&p, &sample_at(50, 0.935), Some(1000)).verdict, Verdict::Continue);
        assert_eq!(evaluate(&p, &sample_at(50, 0.1), None).verdict, Verdict::Indeterminate);
        assert_eq!(evaluate(&p, &sample_at(50, 0.1), Some(0)).verdict, Verdict::Indeterminate);
        // exactly at the gate counts as eligible
        assert_eq!(evaluate(&p, &sample_at(10, 0.1), Some(1000)).verdict, Verdict::Terminate);
        // exactly at the threshold continues
        assert_eq!(evaluate(&p, &sample_at(50, 0.30), Some(1000)).verdict, Verdict::Continue);
    }

    #[test]
    fn supervise_examples() {
        let p = EarlyStopPolicy::default();
        let low: Vec<_> = [5, 10, 15].iter().map(|&x| sample_at(x, 0.10)).collect();
        let out = supervise(&low, &p, Some(1000));
        assert_eq!(out.decision.verdict, Verdict::Terminate);
        assert_relative_eq!(out.consumed_fraction, 0.10);
        assert_eq!(out.stopped_at_seconds, Some(10.0));

        let high: Vec<_> = (1..=10).map(|x| sample_at(x * 10, 0.90)).collect();
        let out = supervise(&high, &p, Some(1000));
        assert_eq!(out.decision.verdict, Verdict::Continue);
        assert_eq!(out.consumed_fraction, 1.0);

        let out = supervise(&[], &p, Some(1000));
        assert_eq!(out.decision.verdict, Verdict::Indeterminate);
        assert_eq!(out.consumed_fraction, 1.0);

        let out = supervise(&low, &p, None);
        assert_eq!(out.decision.verdict, Verdict::Indeterminate);
        assert_eq!(out.consumed_fraction, 1.0);
    }

    #[test]
    fn policy_validation() {
        assert!(EarlyStopPolicy::new(0.3, 0.1, 30.0).is_ok());
        assert!(EarlyStopPolicy::new(1.3, 0.1, 30.0).is_err());
        assert!(EarlyStopPolicy::new(0.3, 0.0, 30.0).is_err());
        assert!(EarlyStopPolicy::new(0.3, 1.0, 30.0).is_ok());
        assert!(EarlyStopPolicy::new(0.3, 0.1, 0.0).is_err());
    }

    #[test]
    fn log_rebases_and_wraps_midnight() {
        let text = format!(
            "{PROGRESS_HEADER}\n{}\n{}\n",
            FIXTURE.replace("10:31:23", "23:59:30"),
            FIXTURE.replace("10:31:23", "00:00:30").replace("1443455", "2000000"),
        );
        let samples = parse_progress_log(&text, &ColumnMap::default());
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].elapsed_seconds, 0.0);
        assert_eq!(samples[1].elapsed_seconds, 60.0);
    }

    #[test]
    fn formatted_line_round_trips() {
        let s = ProgressSample::new(125.0, 123_456, 0.8125, 0.0625);
        let line = format_progress_line(&s, 3600.0);
        let back = parse_progress_line(&line, &ColumnMap::default()).unwrap();
        assert_eq!(back.reads_processed, s.reads_processed);
        assert_relative_eq!(back.pct_unique_mapped, s.pct_unique_mapped, epsilon = 1e-4);
        assert_relative_eq!(back.pct_multi_mapped, s.pct_multi_mapped, epsilon = 1e-4);
        assert_eq!(back.elapsed_seconds, 3725.0);
    }

    #[test]
    fn final_log_rate() {
        let text = "                          Uniquely mapped reads % |\t80.30%\n      % of reads mapped to multiple loci |\t13.20%\n";
        assert_relative_eq!(parse_final_mapping_rate(text).unwrap(), 0.935, epsilon = 1e-12);
        assert_eq!(parse_final_mapping_rate("nothing"), None);
    }

    #[test]
    fn tail_reads_only_complete_lines() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("Log.progress.out");
        let mut tail = LogTail::new(&path, ColumnMap::default());
        assert!(tail.poll().unwrap().is_empty());
        let mut f = File::create(&path).unwrap();
        writeln!(f, "{PROGRESS_HEADER}").unwrap();
        write!(f, "{FIXTURE}").unwrap();
        f.flush().unwrap();
        assert!(tail.poll().unwrap().is_empty());
        writeln!(f).unwrap();
        writeln!(f, "{}", FIXTURE.replace("10:31:23", "10:32:23")).unwrap();
        f.flush().unwrap();
        let got = tail.poll().unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[1].elapsed_seconds, 60.0);
        assert!(tail.poll().unwrap().is_empty());
    }
}
