//! Foreign-currency liquidation agents: data preparation, learned and
//! heuristic hold/sell policies, adaptive decision thresholds, and an
//! episode-level backtesting harness with cross-method ranking.

pub mod backtest;
pub mod baselines;
pub mod data;
pub mod nn;
pub mod rl_il;
pub mod rng;
pub mod stopping;
pub mod threshold;
pub mod topk;

pub use backtest::{
    acr, compare, run_episode, BacktestConfig, EpisodeResult, MethodPairResults, OracleNPolicy,
    OraclePolicy, Policy, RankingTable, RevenueModel, RewardScale,
};
pub use baselines::{Action, IndicatorSpec, NaiveStrategy};
pub use data::{
    build_episodes, load_rate_series, make_state, split_chronological, Episode, EpisodeSplits,
    RateSeries, SplitBoundaries, SplitTag, State,
};
pub use stopping::{DecisionEstimator, DecisionSignal, HorizonMode, LearnerConfig};
pub use threshold::{
    calibrate_threshold, evaluate_with_at, CalibrationConfig, CalibrationTarget, CandidateSource,
    ThresholdMode, ThresholdRule,
};
