//! Daily FX rate ingestion, rolling-window episode construction, chronological
//! splits, and per-step agent states.
//!
//! Input series are assumed to contain business days only; rows with missing
//! or non-positive rates are dropped (and counted) rather than interpolated.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::NaiveDate;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),
    #[error("no valid rows after dropping {dropped} invalid ones")]
    NoValidRows { dropped: usize },
    #[error("series has {len} rows, horizon needs at least {horizon}")]
    SeriesTooShort { len: usize, horizon: usize },
    #[error("horizon must be at least 2, got {0}")]
    BadHorizon(usize),
    #[error("shift must be at least 1, got {0}")]
    BadShift(usize),
    #[error("window length must be at least 1")]
    BadWindow,
    #[error("step {t} out of range for horizon {horizon}")]
    TimeOutOfRange { t: usize, horizon: usize },
    #[error("rate {rate} at index {index} is not positive and finite")]
    BadRate { index: usize, rate: f64 },
    #[error("episode must have at least 1 rate")]
    EpisodeTooShort,
    #[error("empty {0} split: check the boundary dates")]
    EmptySplit(&'static str),
    #[error("validation start {0} must precede test start {1}")]
    UnorderedBoundaries(NaiveDate, NaiveDate),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw daily exchange-rate series for one currency pair (HC per unit FC).
#[derive(Clone, Debug)]
pub struct RateSeries {
    pub pair: String,
    pub dates: Vec<NaiveDate>,
    pub rates: Vec<f64>,
}

impl RateSeries {
    /// Sorts rows by date and validates the series invariants.
    pub fn new(pair: &str, mut rows: Vec<(NaiveDate, f64)>) -> Result<RateSeries, DataError> {
        rows.sort_by_key(|(d, _)| *d);
        for w in rows.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(DataError::DuplicateDate(w[0].0));
            }
        }
        for (i, (_, r)) in rows.iter().enumerate() {
            if !(r.is_finite() && *r > 0.0) {
                return Err(DataError::BadRate { index: i, rate: *r });
            }
        }
        let (dates, rates) = rows.into_iter().unzip();
        Ok(RateSeries {
            pair: pair.to_string(),
            dates,
            rates,
        })
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

/// Result of loading a CSV: the clean series plus how many rows were dropped
/// for missing or non-positive rates.
#[derive(Debug)]
pub struct SeriesLoad {
    pub series: RateSeries,
    pub dropped_rows: usize,
}

/// Parse a `date,rate` CSV (header optional, ISO-8601 dates). Rows with a
/// missing, non-positive, or non-finite rate are dropped and counted; rows
/// that do not parse at all are an error naming the line.
pub fn load_rate_series(path: &Path, pair: &str) -> Result<SeriesLoad, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    parse_rate_csv(reader, pair)
}

pub fn parse_rate_csv<R: BufRead>(reader: R, pair: &str) -> Result<SeriesLoad, DataError> {
    let mut rows = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut fields = trimmed.splitn(2, ',');
        let date_field = fields.next().unwrap_or("").trim();
        let rate_field = fields.next();
        let date = match NaiveDate::parse_from_str(date_field, "%Y-%m-%d") {
            Ok(d) => d,
            Err(_) if idx == 0 => continue, // optional header row
            Err(_) => {
                return Err(DataError::MalformedRow {
                    line: lineno,
                    reason: format!("bad date {date_field:?}"),
                })
            }
        };
        let rate_field = match rate_field {
            Some(r) => r.trim(),
            None => {
                return Err(DataError::MalformedRow {
                    line: lineno,
                    reason: "missing rate column".into(),
                })
            }
        };
        if rate_field.is_empty() {
            dropped += 1;
            continue;
        }
        let rate: f64 = rate_field.parse().map_err(|_| DataError::MalformedRow {
            line: lineno,
            reason: format!("bad rate {rate_field:?}"),
        })?;
        if !(rate.is_finite() && rate > 0.0) {
            dropped += 1;
            continue;
        }
        rows.push((date, rate));
    }
    if rows.is_empty() {
        return Err(DataError::NoValidRows { dropped });
    }
    Ok(SeriesLoad {
        series: RateSeries::new(pair, rows)?,
        dropped_rows: dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        };
        f.write_str(s)
    }
}

/// One fixed-horizon trading window. `norm_rates` are the raw rates divided
/// by the window's first rate, so `norm_rates[0]` is exactly 1.
#[derive(Clone, Debug)]
pub struct Episode {
    pub id: usize,
    pub start_date: NaiveDate,
    pub raw_rates: Vec<f64>,
    pub norm_rates: Vec<f64>,
    pub split: Option<SplitTag>,
}

impl Episode {
    pub fn from_raw(
        id: usize,
        start_date: NaiveDate,
        raw_rates: Vec<f64>,
    ) -> Result<Episode, DataError> {
        if raw_rates.is_empty() {
            return Err(DataError::EpisodeTooShort);
        }
        for (i, r) in raw_rates.iter().enumerate() {
            if !(r.is_finite() && *r > 0.0) {
                return Err(DataError::BadRate { index: i, rate: *r });
            }
        }
        let first = raw_rates[0];
        let norm_rates = raw_rates.iter().map(|r| r / first).collect();
        Ok(Episode {
            id,
            start_date,
            raw_rates,
            norm_rates,
            split: None,
        })
    }

    /// Number of steps T in the episode.
    pub fn horizon(&self) -> usize {
        self.norm_rates.len()
    }

    /// Normalized rate at step t.
    pub fn norm(&self, t: usize) -> f64 {
        self.norm_rates[t]
    }
}

/// Roll a window of length `horizon` over the series with the given shift.
/// Episode k covers indices [k*shift, k*shift + horizon).
pub fn build_episodes(
    series: &RateSeries,
    horizon: usize,
    shift: usize,
) -> Result<Vec<Episode>, DataError> {
    if horizon < 2 {
        return Err(DataError::BadHorizon(horizon));
    }
    if shift < 1 {
        return Err(DataError::BadShift(shift));
    }
    if series.len() < horizon {
        return Err(DataError::SeriesTooShort {
            len: series.len(),
            horizon,
        });
    }
    let count = (series.len() - horizon) / shift + 1;
    let mut episodes = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * shift;
        episodes.push(Episode::from_raw(
            k,
            series.dates[start],
            series.rates[start..start + horizon].to_vec(),
        )?);
    }
    Ok(episodes)
}

/// Count the episodes that do not overlap, taken greedily from the first.
/// Reported alongside the total because overlapping windows share data.
pub fn non_overlapping_count(episodes: &[Episode], horizon: usize, shift: usize) -> usize {
    let mut count = 0;
    let mut next_free = 0usize;
    for ep in episodes {
        let start = ep.id * shift;
        if start >= next_free {
            count += 1;
            next_free = start + horizon;
        }
    }
    count
}

#[derive(Clone, Copy, Debug)]
pub struct SplitBoundaries {
    pub validation_start: NaiveDate,
    pub test_start: NaiveDate,
}

#[derive(Clone, Debug)]
pub struct EpisodeSplits {
    pub train: Vec<Episode>,
    pub validation: Vec<Episode>,
    pub test: Vec<Episode>,
}

/// Assign each episode to train/validation/test by its start date.
pub fn split_chronological(
    episodes: Vec<Episode>,
    boundaries: SplitBoundaries,
) -> Result<EpisodeSplits, DataError> {
    if boundaries.validation_start >= boundaries.test_start {
        return Err(DataError::UnorderedBoundaries(
            boundaries.validation_start,
            boundaries.test_start,
        ));
    }
    let mut splits = EpisodeSplits {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for mut ep in episodes {
        let tag = if ep.start_date < boundaries.validation_start {
            SplitTag::Train
        } else if ep.start_date < boundaries.test_start {
            SplitTag::Validation
        } else {
            SplitTag::Test
        };
        ep.split = Some(tag);
        match tag {
            SplitTag::Train => splits.train.push(ep),
            SplitTag::Validation => splits.validation.push(ep),
            SplitTag::Test => splits.test.push(ep),
        }
    }
    if splits.train.is_empty() {
        return Err(DataError::EmptySplit("train"));
    }
    if splits.validation.is_empty() {
        return Err(DataError::EmptySplit("validation"));
    }
    if splits.test.is_empty() {
        return Err(DataError::EmptySplit("test"));
    }
    Ok(splits)
}

/// Agent observation at one step: the trailing window of normalized rates,
/// the step index, and (optionally) true future rates when the
/// state-augmentation flag is on.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub window: Vec<f64>,
    pub time_index: usize,
    pub current_rate: f64,
    pub future_actuals: Option<Vec<f64>>,
}

impl State {
    /// Flatten into a network input: window, then t/T when a horizon is
    /// given, then any future-rate augmentation.
    pub fn features(&self, time_scale: Option<usize>) -> Vec<f64> {
        let extra = time_scale.is_some() as usize
            + self.future_actuals.as_ref().map_or(0, |f| f.len());
        let mut out = Vec::with_capacity(self.window.len() + extra);
        out.extend_from_slice(&self.window);
        if let Some(horizon) = time_scale {
            out.push(self.time_index as f64 / horizon as f64);
        }
        if let Some(f) = &self.future_actuals {
            out.extend_from_slice(f);
        }
        out
    }
}

/// Observation at step t: the past-n normalized rates ending at t (left-padded
/// with 1.0 before the window fills), plus `augment_m` true future rates
/// (zero-padded past the episode end) when `augment_m > 0`.
pub fn make_state(
    episode: &Episode,
    t: usize,
    n: usize,
    augment_m: usize,
) -> Result<State, DataError> {
    let horizon = episode.horizon();
    if t >= horizon {
        return Err(DataError::TimeOutOfRange { t, horizon });
    }
    if n < 1 {
        return Err(DataError::BadWindow);
    }
    let have = t + 1;
    let mut window = vec![1.0; n.saturating_sub(have)];
    window.extend_from_slice(&episode.norm_rates[have.saturating_sub(n)..have]);
    let future_actuals = if augment_m > 0 {
        let hi = (t + augment_m).min(horizon - 1);
        let mut f: Vec<f64> = episode.norm_rates[t + 1..=hi.max(t)].to_vec();
        f.resize(augment_m, 0.0);
        Some(f)
    } else {
        None
    };
    Ok(State {
        window,
        time_index: t,
        current_rate: episode.norm_rates[t],
        future_actuals,
    })
}

/// Write the audit CSV: `episode_id,start_date,split,t,raw_rate,norm_rate`.
pub fn write_episode_store<W: Write>(episodes: &[Episode], w: &mut W) -> Result<(), DataError> {
    writeln!(w, "episode_id,start_date,split,t,raw_rate,norm_rate")?;
    for ep in episodes {
        let split = ep.split.map(|s| s.to_string()).unwrap_or_default();
        for t in 0..ep.horizon() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                ep.id, ep.start_date, split, t, ep.raw_rates[t], ep.norm_rates[t]
            )?;
        }
    }
    Ok(())
}
