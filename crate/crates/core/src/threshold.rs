//! Per-episode calibration of the decision threshold from trailing historical
//! episodes. Works for any estimator that produces decision signals, and also
//! drives the rate-threshold baseline that compares the FX rate itself
//! against the calibrated boundary.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use chrono::NaiveDate;
use thiserror::Error;

use crate::backtest::{acr, run_episode, BacktestConfig, BacktestError, EpisodeResult, Policy};
use crate::baselines::Action;
use crate::data::Episode;
use crate::stopping::{DecisionEstimator, DecisionSignal};

#[derive(Error, Debug)]
pub enum ThresholdError {
    #[error("candidate_count must be at least 2, got {0}")]
    TooFewCandidates(usize),
    #[error("window_len must be at least 1")]
    EmptyWindow,
    #[error(transparent)]
    Backtest(#[from] BacktestError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Sell when the decision signal falls below delta.
    Signal,
    /// Sell when the current normalized rate exceeds delta (the Sell-AT
    /// baseline).
    Rate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdRule {
    pub mode: ThresholdMode,
    pub delta: f64,
}

impl ThresholdRule {
    pub fn zero(mode: ThresholdMode) -> ThresholdRule {
        ThresholdRule { mode, delta: 0.0 }
    }
}

pub fn threshold_decide(rule: ThresholdRule, d: f64, current_rate: f64) -> Action {
    let sell = match rule.mode {
        ThresholdMode::Signal => d - rule.delta < 0.0,
        ThresholdMode::Rate => current_rate > rule.delta,
    };
    if sell {
        Action::Sell
    } else {
        Action::Hold
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CandidateSource {
    /// Evenly spaced quantiles of the window's empirical signal (or rate)
    /// distribution, with 0 appended.
    #[default]
    Quantiles,
    /// Evenly spaced values over a fixed span, with 0 appended.
    FixedGrid,
    /// The single candidate 0 (disables adaptation).
    ZeroOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct CalibrationConfig {
    /// Trailing episodes consulted per calibration.
    pub window_len: usize,
    pub candidate_count: usize,
    pub source: CandidateSource,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            window_len: 50,
            candidate_count: 21,
            source: CandidateSource::Quantiles,
        }
    }
}

/// What the threshold is compared against: a learned estimator's signal, or
/// the normalized rate itself.
pub enum CalibrationTarget<'a> {
    Signal(&'a dyn DecisionEstimator),
    Rate,
}

impl CalibrationTarget<'_> {
    pub fn mode(&self) -> ThresholdMode {
        match self {
            CalibrationTarget::Signal(_) => ThresholdMode::Signal,
            CalibrationTarget::Rate => ThresholdMode::Rate,
        }
    }

    pub fn method_name(&self) -> String {
        match self {
            CalibrationTarget::Signal(est) => est.name(),
            CalibrationTarget::Rate => "sell-at".into(),
        }
    }

    pub fn policy(&self, rule: ThresholdRule) -> ThresholdPolicy<'_> {
        match self {
            CalibrationTarget::Signal(est) => ThresholdPolicy::Signal(SignalPolicy {
                estimator: *est,
                rule,
            }),
            CalibrationTarget::Rate => ThresholdPolicy::Rate(RateThresholdPolicy { rule }),
        }
    }
}

/// Estimator plus threshold: the uniform decision pathway for every learner.
pub struct SignalPolicy<'a> {
    pub estimator: &'a dyn DecisionEstimator,
    pub rule: ThresholdRule,
}

impl Policy for SignalPolicy<'_> {
    fn act(&self, episode: &Episode, t: usize) -> Action {
        let DecisionSignal { d, .. } = self.estimator.decision(episode, t);
        threshold_decide(self.rule, d, episode.norm(t))
    }

    fn name(&self) -> String {
        self.estimator.name()
    }

    fn threshold(&self) -> Option<f64> {
        Some(self.rule.delta)
    }
}

/// The Sell-AT baseline: compare the rate itself against the threshold.
pub struct RateThresholdPolicy {
    pub rule: ThresholdRule,
}

impl Policy for RateThresholdPolicy {
    fn act(&self, episode: &Episode, t: usize) -> Action {
        threshold_decide(self.rule, 0.0, episode.norm(t))
    }

    fn name(&self) -> String {
        "sell-at".into()
    }

    fn threshold(&self) -> Option<f64> {
        Some(self.rule.delta)
    }
}

pub enum ThresholdPolicy<'a> {
    Signal(SignalPolicy<'a>),
    Rate(RateThresholdPolicy),
}

impl Policy for ThresholdPolicy<'_> {
    fn act(&self, episode: &Episode, t: usize) -> Action {
        match self {
            ThresholdPolicy::Signal(p) => p.act(episode, t),
            ThresholdPolicy::Rate(p) => p.act(episode, t),
        }
    }

    fn name(&self) -> String {
        match self {
            ThresholdPolicy::Signal(p) => p.name(),
            ThresholdPolicy::Rate(p) => p.name(),
        }
    }

    fn threshold(&self) -> Option<f64> {
        match self {
            ThresholdPolicy::Signal(p) => p.threshold(),
            ThresholdPolicy::Rate(p) => p.threshold(),
        }
    }
}

/// Memoized estimator signals. Candidate evaluation replays the same window
/// under many thresholds, and consecutive calibration windows overlap almost
/// entirely, so each (episode, t) signal is computed exactly once.
struct SignalCache<'a> {
    estimator: &'a dyn DecisionEstimator,
    by_episode: RefCell<HashMap<usize, Rc<Vec<f64>>>>,
}

impl<'a> SignalCache<'a> {
    fn new(estimator: &'a dyn DecisionEstimator) -> Self {
        SignalCache {
            estimator,
            by_episode: RefCell::new(HashMap::new()),
        }
    }

    fn signals(&self, episode: &Episode) -> Rc<Vec<f64>> {
        if let Some(hit) = self.by_episode.borrow().get(&episode.id) {
            return hit.clone();
        }
        let computed: Rc<Vec<f64>> = Rc::new(
            (0..episode.horizon())
                .map(|t| self.estimator.decision(episode, t).d)
                .collect(),
        );
        self.by_episode
            .borrow_mut()
            .insert(episode.id, computed.clone());
        computed
    }
}

/// Threshold policy reading signals from the cache instead of the estimator.
struct CachedSignalPolicy<'p, 'a> {
    cache: &'p SignalCache<'a>,
    rule: ThresholdRule,
}

impl Policy for CachedSignalPolicy<'_, '_> {
    fn act(&self, episode: &Episode, t: usize) -> Action {
        let d = self.cache.signals(episode)[t];
        threshold_decide(self.rule, d, episode.norm(t))
    }

    fn name(&self) -> String {
        self.cache.estimator.name()
    }

    fn threshold(&self) -> Option<f64> {
        Some(self.rule.delta)
    }
}

/// Evenly spaced quantile of a sorted sample, by linear interpolation.
fn quantile(sorted: &[f64], level: f64) -> f64 {
    let pos = level * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Build the candidate thresholds for a calibration window. Signal grids are
/// quantiles of the estimator's signals over every non-terminal step in the
/// window; rate grids are quantiles of the window's normalized rates. Zero is
/// always a candidate and exact duplicates collapse.
pub fn candidate_grid(
    target: &CalibrationTarget,
    history: &[Episode],
    cfg: &CalibrationConfig,
) -> Result<Vec<f64>, ThresholdError> {
    let cache = match target {
        CalibrationTarget::Signal(est) => Some(SignalCache::new(*est)),
        CalibrationTarget::Rate => None,
    };
    candidate_grid_cached(target, history, cfg, cache.as_ref())
}

fn candidate_grid_cached(
    target: &CalibrationTarget,
    history: &[Episode],
    cfg: &CalibrationConfig,
    cache: Option<&SignalCache>,
) -> Result<Vec<f64>, ThresholdError> {
    if history.is_empty() {
        return Ok(vec![0.0]);
    }
    if cfg.source == CandidateSource::ZeroOnly {
        return Ok(vec![0.0]);
    }
    if cfg.candidate_count < 2 {
        return Err(ThresholdError::TooFewCandidates(cfg.candidate_count));
    }
    let mut grid = match cfg.source {
        CandidateSource::Quantiles => {
            let mut values = Vec::new();
            for ep in history {
                match target {
                    CalibrationTarget::Signal(_) => {
                        let signals = cache.expect("signal target has a cache").signals(ep);
                        // The terminal step is a forced sale (some estimators
                        // emit a sentinel there), so it carries no signal.
                        for &d in &signals[..ep.horizon().saturating_sub(1)] {
                            debug_assert!(d.is_finite());
                            values.push(d);
                        }
                    }
                    CalibrationTarget::Rate => values.extend_from_slice(&ep.norm_rates),
                }
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (0..cfg.candidate_count)
                .map(|i| quantile(&values, i as f64 / (cfg.candidate_count - 1) as f64))
                .collect::<Vec<f64>>()
        }
        CandidateSource::FixedGrid => {
            let (lo, hi) = match target {
                CalibrationTarget::Signal(_) => (-0.1, 0.1),
                CalibrationTarget::Rate => (0.9, 1.1),
            };
            (0..cfg.candidate_count)
                .map(|i| lo + (hi - lo) * i as f64 / (cfg.candidate_count - 1) as f64)
                .collect::<Vec<f64>>()
        }
        CandidateSource::ZeroOnly => unreachable!(),
    };
    grid.push(0.0);
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    Ok(grid)
}

/// Average cumulative payoff of one candidate rule over a window.
pub fn evaluate_candidate(
    target: &CalibrationTarget,
    rule: ThresholdRule,
    history: &[Episode],
    bt: BacktestConfig,
) -> Result<f64, ThresholdError> {
    let policy = target.policy(rule);
    let results: Vec<EpisodeResult> = history
        .iter()
        .map(|ep| run_episode(&policy, ep, bt))
        .collect();
    Ok(acr(&results)?)
}

/// Pick the candidate threshold with the highest average cumulative payoff
/// over the trailing window. Ties prefer the smaller |delta|, then the
/// smaller delta. An empty window falls back to delta = 0.
pub fn calibrate_threshold(
    target: &CalibrationTarget,
    history: &[Episode],
    cfg: &CalibrationConfig,
    bt: BacktestConfig,
) -> Result<ThresholdRule, ThresholdError> {
    let cache = match target {
        CalibrationTarget::Signal(est) => Some(SignalCache::new(*est)),
        CalibrationTarget::Rate => None,
    };
    calibrate_cached(target, history, cfg, bt, cache.as_ref())
}

fn calibrate_cached(
    target: &CalibrationTarget,
    history: &[Episode],
    cfg: &CalibrationConfig,
    bt: BacktestConfig,
    cache: Option<&SignalCache>,
) -> Result<ThresholdRule, ThresholdError> {
    if cfg.window_len == 0 {
        return Err(ThresholdError::EmptyWindow);
    }
    let mode = target.mode();
    if history.is_empty() {
        return Ok(ThresholdRule::zero(mode));
    }
    let grid = candidate_grid_cached(target, history, cfg, cache)?;
    let mut best: Option<(f64, f64)> = None; // (payoff, delta)
    for &delta in &grid {
        let rule = ThresholdRule { mode, delta };
        let payoff = window_payoff(target, rule, history, bt, cache)?;
        let better = match best {
            None => true,
            Some((best_payoff, best_delta)) => {
                payoff > best_payoff
                    || (payoff == best_payoff
                        && (delta.abs() < best_delta.abs()
                            || (delta.abs() == best_delta.abs() && delta < best_delta)))
            }
        };
        if better {
            best = Some((payoff, delta));
        }
    }
    let (_, delta) = best.expect("non-empty candidate grid");
    Ok(ThresholdRule { mode, delta })
}

fn window_payoff(
    target: &CalibrationTarget,
    rule: ThresholdRule,
    history: &[Episode],
    bt: BacktestConfig,
    cache: Option<&SignalCache>,
) -> Result<f64, ThresholdError> {
    let results: Vec<EpisodeResult> = match cache {
        Some(cache) => {
            let policy = CachedSignalPolicy { cache, rule };
            history.iter().map(|ep| run_episode(&policy, ep, bt)).collect()
        }
        None => {
            let policy = target.policy(rule);
            history.iter().map(|ep| run_episode(&policy, ep, bt)).collect()
        }
    };
    Ok(acr(&results)?)
}

/// One evaluated episode along with the rule calibrated for it.
#[derive(Clone, Debug)]
pub struct AtEpisodeOutcome {
    pub result: EpisodeResult,
    pub rule: ThresholdRule,
}

/// Evaluate episodes with a per-episode adaptive threshold. Each episode's
/// calibration window is the `window_len` most recent pool episodes whose
/// start date strictly precedes it, regardless of split.
pub fn evaluate_with_at(
    target: &CalibrationTarget,
    eval_episodes: &[Episode],
    pool: &[Episode],
    cfg: &CalibrationConfig,
    bt: BacktestConfig,
) -> Result<Vec<AtEpisodeOutcome>, ThresholdError> {
    let mut sorted: Vec<&Episode> = pool.iter().collect();
    sorted.sort_by_key(|e| (e.start_date, e.id));
    // One cache across all calibrations: trailing windows overlap heavily.
    let cache = match target {
        CalibrationTarget::Signal(est) => Some(SignalCache::new(*est)),
        CalibrationTarget::Rate => None,
    };
    let mut outcomes = Vec::with_capacity(eval_episodes.len());
    for ep in eval_episodes {
        let history = trailing_window(&sorted, ep.start_date, cfg.window_len);
        let rule = calibrate_cached(target, &history, cfg, bt, cache.as_ref())?;
        let result = match &cache {
            Some(cache) => run_episode(&CachedSignalPolicy { cache, rule }, ep, bt),
            None => run_episode(&target.policy(rule), ep, bt),
        };
        outcomes.push(AtEpisodeOutcome { result, rule });
    }
    Ok(outcomes)
}

fn trailing_window(sorted_pool: &[&Episode], before: NaiveDate, window_len: usize) -> Vec<Episode> {
    let end = sorted_pool.partition_point(|e| e.start_date < before);
    sorted_pool[end.saturating_sub(window_len)..end]
        .iter()
        .map(|e| (*e).clone())
        .collect()
}
