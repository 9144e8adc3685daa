//! Resolved run configuration: paper-protocol defaults, overridden first by a
//! `key = value` config file, then by command-line flags. Every run echoes the
//! fully resolved configuration next to its outputs so it can be replayed
//! bit-for-bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;

use fxliq::stopping::LearnerConfig;
use fxliq::threshold::{CalibrationConfig, CandidateSource};
use fxliq::{BacktestConfig, RevenueModel, RewardScale, SplitBoundaries};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub pair: String,
    pub data: PathBuf,
    pub horizon: usize,
    pub shift: usize,
    pub validation_start: NaiveDate,
    pub test_start: NaiveDate,
    pub method: String,
    pub window_n: usize,
    pub k: usize,
    pub gamma: f64,
    pub augment_m: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: [usize; 2],
    pub sync_every: usize,
    pub train_freq: usize,
    pub at_window: usize,
    pub at_candidates: usize,
    pub no_at: bool,
    pub seed: u64,
    pub split: String,
    pub raw_acr: bool,
    pub revenue: RevenueModel,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pair: "EURUSD".into(),
            data: PathBuf::from("data.csv"),
            horizon: 58,
            shift: 5,
            validation_start: NaiveDate::from_ymd_opt(2017, 1, 10).unwrap(),
            test_start: NaiveDate::from_ymd_opt(2019, 4, 25).unwrap(),
            method: String::new(),
            window_n: 10,
            k: 3,
            gamma: 2.0,
            augment_m: 0,
            epochs: 30,
            batch_size: 128,
            learning_rate: 0.003,
            hidden: [256, 128],
            sync_every: 200,
            train_freq: 4,
            at_window: 50,
            at_candidates: 21,
            no_at: false,
            seed: 0,
            split: "test".into(),
            raw_acr: false,
            revenue: RevenueModel::UnitPerStep,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            window_n: self.window_n,
            augment_m: self.augment_m,
            hidden: self.hidden,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            sync_every: self.sync_every,
            seed: self.seed,
        }
    }

    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            window_len: self.at_window,
            candidate_count: self.at_candidates,
            source: if self.no_at {
                CandidateSource::ZeroOnly
            } else {
                CandidateSource::Quantiles
            },
        }
    }

    pub fn backtest(&self) -> BacktestConfig {
        BacktestConfig {
            revenue: self.revenue,
            scale: if self.raw_acr {
                RewardScale::Raw
            } else {
                RewardScale::Excess
            },
        }
    }

    pub fn boundaries(&self) -> SplitBoundaries {
        SplitBoundaries {
            validation_start: self.validation_start,
            test_start: self.test_start,
        }
    }

    /// Serialized `key = value` form; parsing it back yields the same config.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("pair", self.pair.clone());
        kv("data", self.data.display().to_string());
        kv("horizon", self.horizon.to_string());
        kv("shift", self.shift.to_string());
        kv("validation_start", self.validation_start.to_string());
        kv("test_start", self.test_start.to_string());
        kv("method", self.method.clone());
        kv("window_n", self.window_n.to_string());
        kv("k", self.k.to_string());
        kv("gamma", self.gamma.to_string());
        kv("augment_m", self.augment_m.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("hidden", format!("{},{}", self.hidden[0], self.hidden[1]));
        kv("sync_every", self.sync_every.to_string());
        kv("train_freq", self.train_freq.to_string());
        kv("at_window", self.at_window.to_string());
        kv("at_candidates", self.at_candidates.to_string());
        kv("no_at", self.no_at.to_string());
        kv("seed", self.seed.to_string());
        kv("split", self.split.clone());
        kv("raw_acr", self.raw_acr.to_string());
        let revenue = match self.revenue {
            RevenueModel::UnitPerStep => "unit-per-step",
            RevenueModel::UnitAtStart => "unit-at-start",
        };
        kv("revenue", revenue.to_string());
        kv("out", self.out.display().to_string());
        s
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.echo())
            .with_context(|| format!("writing config echo {}", path.display()))
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_date = |v: &str| {
            NaiveDate::parse_from_str(v, "%Y-%m-%d")
                .with_context(|| format!("bad date {v:?} for {key}"))
        };
        match key {
            "pair" => self.pair = value.to_string(),
            "data" => self.data = PathBuf::from(value),
            "horizon" => self.horizon = value.parse().context("horizon")?,
            "shift" => self.shift = value.parse().context("shift")?,
            "validation_start" => self.validation_start = parse_date(value)?,
            "test_start" => self.test_start = parse_date(value)?,
            "method" => self.method = value.to_string(),
            "window_n" => self.window_n = value.parse().context("window_n")?,
            "k" => self.k = value.parse().context("k")?,
            "gamma" => self.gamma = value.parse().context("gamma")?,
            "augment_m" => self.augment_m = value.parse().context("augment_m")?,
            "epochs" => self.epochs = value.parse().context("epochs")?,
            "batch_size" => self.batch_size = value.parse().context("batch_size")?,
            "learning_rate" => self.learning_rate = value.parse().context("learning_rate")?,
            "hidden" => self.hidden = parse_hidden(value)?,
            "sync_every" => self.sync_every = value.parse().context("sync_every")?,
            "train_freq" => self.train_freq = value.parse().context("train_freq")?,
            "at_window" => self.at_window = value.parse().context("at_window")?,
            "at_candidates" => self.at_candidates = value.parse().context("at_candidates")?,
            "no_at" => self.no_at = value.parse().context("no_at")?,
            "seed" => self.seed = value.parse().context("seed")?,
            "split" => self.split = value.to_string(),
            "raw_acr" => self.raw_acr = value.parse().context("raw_acr")?,
            "revenue" => {
                self.revenue = match value {
                    "unit-per-step" => RevenueModel::UnitPerStep,
                    "unit-at-start" => RevenueModel::UnitAtStart,
                    other => bail!("unknown revenue model {other:?}"),
                }
            }
            "out" => self.out = PathBuf::from(value),
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key = value", path.display(), idx + 1))?;
            self.apply_kv(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), idx + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            bail!("horizon must be at least 2");
        }
        if self.shift < 1 {
            bail!("shift must be at least 1");
        }
        if self.validation_start >= self.test_start {
            bail!("validation_start must precede test_start");
        }
        if !(1..=5).contains(&self.k) {
            bail!("k must be in 1..=5");
        }
        if self.window_n == 0 {
            bail!("window_n must be at least 1");
        }
        if !matches!(self.split.as_str(), "train" | "validation" | "test") {
            bail!("split must be train, validation, or test");
        }
        Ok(())
    }
}

pub fn parse_hidden(value: &str) -> Result<[usize; 2]> {
    let mut it = value.split(',');
    let a = it
        .next()
        .and_then(|v| v.trim().parse().ok())
        .context("hidden expects two comma-separated sizes")?;
    let b = it
        .next()
        .and_then(|v| v.trim().parse().ok())
        .context("hidden expects two comma-separated sizes")?;
    if it.next().is_some() {
        bail!("hidden expects exactly two sizes");
    }
    Ok([a, b])
}

/// Nonempty map of overrides collected from clap flags.
pub type Overrides = BTreeMap<&'static str, String>;

/// defaults <- config file <- explicit flags.
pub fn resolve(config_file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config_file {
        cfg.load_file(path)?;
    }
    for (key, value) in overrides {
        cfg.apply_kv(key, value)?;
    }
    if let (Some(root), false) = (std::env::var_os("FXLIQ_OUT"), cfg.out.is_absolute()) {
        cfg.out = PathBuf::from(root).join(&cfg.out);
    }
    cfg.validate()?;
    Ok(cfg)
}
