//! Non-learning policies: naive liquidation rules and forex-indicator
//! crossover strategies. Each maps (episode, t) straight to an action using
//! only rates at or before t.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::Episode;

/// Hold, or sell the entire FC balance accumulated so far.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Hold,
    Sell,
}

#[derive(Error, Debug)]
pub enum StrategyError {
    #[error("unknown strategy token {0:?}")]
    UnknownToken(String),
    #[error("bad parameters in {0:?}: {1}")]
    BadParams(String, String),
    #[error("ema-cross requires fast < slow, got {fast} >= {slow}")]
    UnorderedPeriods { fast: usize, slow: usize },
    #[error("indicator periods must be at least 1")]
    ZeroPeriod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NaiveStrategy {
    SellAtEnd,
    SellImmediately,
    SellGreedily,
}

impl fmt::Display for NaiveStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NaiveStrategy::SellAtEnd => "sell-at-end",
            NaiveStrategy::SellImmediately => "sell-immediately",
            NaiveStrategy::SellGreedily => "sell-greedily",
        };
        f.write_str(s)
    }
}

impl FromStr for NaiveStrategy {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sell-at-end" => Ok(NaiveStrategy::SellAtEnd),
            "sell-immediately" => Ok(NaiveStrategy::SellImmediately),
            "sell-greedily" => Ok(NaiveStrategy::SellGreedily),
            other => Err(StrategyError::UnknownToken(other.to_string())),
        }
    }
}

/// Indicator crossover rules. Sell conditions:
/// - `EmaCross`: EMA(fast) < EMA(slow)
/// - `RateVsEma`: current rate < EMA(period)
/// - `MacdSignal`: MACD < signal
/// - `MacdSignalPositive`: MACD < signal and MACD > 0
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndicatorSpec {
    EmaCross { fast: usize, slow: usize },
    RateVsEma { period: usize },
    MacdSignal,
    MacdSignalPositive,
}

impl IndicatorSpec {
    pub fn ema_cross(fast: usize, slow: usize) -> Result<IndicatorSpec, StrategyError> {
        if fast == 0 || slow == 0 {
            return Err(StrategyError::ZeroPeriod);
        }
        if fast >= slow {
            return Err(StrategyError::UnorderedPeriods { fast, slow });
        }
        Ok(IndicatorSpec::EmaCross { fast, slow })
    }

    pub fn rate_vs_ema(period: usize) -> Result<IndicatorSpec, StrategyError> {
        if period == 0 {
            return Err(StrategyError::ZeroPeriod);
        }
        Ok(IndicatorSpec::RateVsEma { period })
    }
}

impl fmt::Display for IndicatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndicatorSpec::EmaCross { fast, slow } => write!(f, "ema-cross:{fast},{slow}"),
            IndicatorSpec::RateVsEma { period } => write!(f, "rate-vs-ema:{period}"),
            IndicatorSpec::MacdSignal => f.write_str("macd-signal"),
            IndicatorSpec::MacdSignalPositive => f.write_str("macd-signal-pos"),
        }
    }
}

impl FromStr for IndicatorSpec {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "macd-signal" {
            return Ok(IndicatorSpec::MacdSignal);
        }
        if s == "macd-signal-pos" {
            return Ok(IndicatorSpec::MacdSignalPositive);
        }
        if let Some(params) = s.strip_prefix("ema-cross:") {
            let mut it = params.split(',');
            let parse = |tok: Option<&str>| {
                tok.and_then(|t| t.trim().parse::<usize>().ok())
                    .ok_or_else(|| {
                        StrategyError::BadParams(s.to_string(), "expected ema-cross:fast,slow".into())
                    })
            };
            let fast = parse(it.next())?;
            let slow = parse(it.next())?;
            return IndicatorSpec::ema_cross(fast, slow);
        }
        if let Some(param) = s.strip_prefix("rate-vs-ema:") {
            let period = param.trim().parse::<usize>().map_err(|_| {
                StrategyError::BadParams(s.to_string(), "expected rate-vs-ema:period".into())
            })?;
            return IndicatorSpec::rate_vs_ema(period);
        }
        Err(StrategyError::UnknownToken(s.to_string()))
    }
}

/// The four indicator configurations evaluated in the cross-method report.
pub fn standard_indicators() -> Vec<IndicatorSpec> {
    vec![
        IndicatorSpec::ema_cross(10, 20).unwrap(),
        IndicatorSpec::rate_vs_ema(10).unwrap(),
        IndicatorSpec::rate_vs_ema(100).unwrap(),
        IndicatorSpec::ema_cross(50, 100).unwrap(),
        IndicatorSpec::MacdSignal,
        IndicatorSpec::MacdSignalPositive,
    ]
}

/// Exponential moving average seeded with the first observation:
/// `out[0] = series[0]`, `out[t] = a*series[t] + (1-a)*out[t-1]`, `a = 2/(period+1)`.
pub fn ema(series: &[f64], period: usize) -> Vec<f64> {
    assert!(period >= 1, "ema period must be at least 1");
    assert!(!series.is_empty(), "ema of an empty series");
    let alpha = 2.0 / (period as f64 + 1.0);
    let mut out = Vec::with_capacity(series.len());
    let mut prev = series[0];
    out.push(prev);
    for &x in &series[1..] {
        prev = alpha * x + (1.0 - alpha) * prev;
        out.push(prev);
    }
    out
}

/// MACD line (EMA(12) - EMA(26)) and its 9-period signal EMA.
pub fn macd(series: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let fast = ema(series, 12);
    let slow = ema(series, 26);
    let line: Vec<f64> = fast.iter().zip(slow.iter()).map(|(f, s)| f - s).collect();
    let signal = ema(&line, 9);
    (line, signal)
}

pub fn naive_action(strategy: NaiveStrategy, episode: &Episode, t: usize) -> Action {
    assert!(t < episode.horizon(), "t out of range");
    let sell = match strategy {
        NaiveStrategy::SellAtEnd => t == episode.horizon() - 1,
        NaiveStrategy::SellImmediately => true,
        NaiveStrategy::SellGreedily => episode.norm(t) > 1.0,
    };
    if sell {
        Action::Sell
    } else {
        Action::Hold
    }
}

/// Evaluate the crossover rule at t using only norm_rates[0..=t]; terminal
/// liquidation is the backtester's job, not this policy's.
pub fn indicator_action(spec: IndicatorSpec, episode: &Episode, t: usize) -> Action {
    assert!(t < episode.horizon(), "t out of range");
    let prefix = &episode.norm_rates[..=t];
    let sell = match spec {
        IndicatorSpec::EmaCross { fast, slow } => {
            let f = ema(prefix, fast);
            let s = ema(prefix, slow);
            f[t] < s[t]
        }
        IndicatorSpec::RateVsEma { period } => {
            let e = ema(prefix, period);
            prefix[t] < e[t]
        }
        IndicatorSpec::MacdSignal => {
            let (line, signal) = macd(prefix);
            line[t] < signal[t]
        }
        IndicatorSpec::MacdSignalPositive => {
            let (line, signal) = macd(prefix);
            line[t] < signal[t] && line[t] > 0.0
        }
    };
    if sell {
        Action::Sell
    } else {
        Action::Hold
    }
}
