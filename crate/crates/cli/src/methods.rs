//! Method registry: every strategy the harness can train and evaluate, keyed
//! by its CLI token.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use fxliq::backtest::{run_episode, EpisodeResult};
use fxliq::data::{Episode, EpisodeSplits};
use fxliq::rl_il::{
    train_dqn, train_imitation, DqnConfig, ImitationModel, ImitationVariant, QModel, RewardKind,
};
use fxliq::stopping::{
    train_brr, train_q_stopping, train_value, BrrModel, DecisionEstimator, HorizonMode,
    QStoppingModel, ValueModel,
};
use fxliq::threshold::{evaluate_with_at, CalibrationTarget};
use fxliq::topk::{train_topk, TopKModel};
use fxliq::{IndicatorSpec, NaiveStrategy, OracleNPolicy, OraclePolicy};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LearnedMethod {
    Brr,
    DpFinite,
    DpInfinite,
    QStopping,
    Dqn(RewardKind),
    Il(IlKind),
    TopK,
}

/// Imitation variant without its gamma (which comes from the run config).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IlKind {
    Vanilla,
    Downsample,
    Focal,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Naive(NaiveStrategy),
    Indicator(IndicatorSpec),
    SellAt,
    Learned(LearnedMethod),
    Oracle,
    OracleN(usize),
}

impl Method {
    pub fn token(&self) -> String {
        match self {
            Method::Naive(s) => s.to_string(),
            Method::Indicator(s) => s.to_string(),
            Method::SellAt => "sell-at".into(),
            Method::Learned(LearnedMethod::Brr) => "brr".into(),
            Method::Learned(LearnedMethod::DpFinite) => "dp-finite".into(),
            Method::Learned(LearnedMethod::DpInfinite) => "dp-infinite".into(),
            Method::Learned(LearnedMethod::QStopping) => "q-stopping".into(),
            Method::Learned(LearnedMethod::Dqn(kind)) => kind.token().into(),
            Method::Learned(LearnedMethod::Il(IlKind::Vanilla)) => "il".into(),
            Method::Learned(LearnedMethod::Il(IlKind::Downsample)) => "il-down".into(),
            Method::Learned(LearnedMethod::Il(IlKind::Focal)) => "il-focal".into(),
            Method::Learned(LearnedMethod::TopK) => "topk".into(),
            Method::Oracle => "oracle".into(),
            Method::OracleN(n) => format!("oracle-n:{n}"),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, Method::Learned(_))
    }
}

pub fn parse_method(token: &str) -> Result<Method> {
    let method = match token {
        "sell-at" => Method::SellAt,
        "brr" => Method::Learned(LearnedMethod::Brr),
        "dp-finite" => Method::Learned(LearnedMethod::DpFinite),
        "dp-infinite" => Method::Learned(LearnedMethod::DpInfinite),
        "q-stopping" => Method::Learned(LearnedMethod::QStopping),
        "dqn" => Method::Learned(LearnedMethod::Dqn(RewardKind::Vanilla)),
        "dqn-rank" => Method::Learned(LearnedMethod::Dqn(RewardKind::Ranking)),
        "dqn-binary" => Method::Learned(LearnedMethod::Dqn(RewardKind::Binary)),
        "il" => Method::Learned(LearnedMethod::Il(IlKind::Vanilla)),
        "il-down" => Method::Learned(LearnedMethod::Il(IlKind::Downsample)),
        "il-focal" => Method::Learned(LearnedMethod::Il(IlKind::Focal)),
        "topk" => Method::Learned(LearnedMethod::TopK),
        "oracle" => Method::Oracle,
        other => {
            if let Some(n) = other.strip_prefix("oracle-n:") {
                return Ok(Method::OracleN(n.parse().context("oracle-n:<steps>")?));
            }
            if let Ok(naive) = other.parse::<NaiveStrategy>() {
                return Ok(Method::Naive(naive));
            }
            if let Ok(spec) = other.parse::<IndicatorSpec>() {
                return Ok(Method::Indicator(spec));
            }
            bail!("unknown method token {other:?}");
        }
    };
    Ok(method)
}

/// The 21 evaluated configurations: 4 naive, 6 indicator, 1 backward
/// recursion, 3 DQN, 3 imitation, 3 value-based, 1 top-K.
pub fn all_methods() -> Vec<Method> {
    let mut methods = vec![
        Method::Naive(NaiveStrategy::SellAtEnd),
        Method::Naive(NaiveStrategy::SellImmediately),
        Method::Naive(NaiveStrategy::SellGreedily),
        Method::SellAt,
    ];
    methods.extend(
        fxliq::baselines::standard_indicators()
            .into_iter()
            .map(Method::Indicator),
    );
    methods.extend([
        Method::Learned(LearnedMethod::Brr),
        Method::Learned(LearnedMethod::Dqn(RewardKind::Vanilla)),
        Method::Learned(LearnedMethod::Dqn(RewardKind::Ranking)),
        Method::Learned(LearnedMethod::Dqn(RewardKind::Binary)),
        Method::Learned(LearnedMethod::Il(IlKind::Vanilla)),
        Method::Learned(LearnedMethod::Il(IlKind::Downsample)),
        Method::Learned(LearnedMethod::Il(IlKind::Focal)),
        Method::Learned(LearnedMethod::DpFinite),
        Method::Learned(LearnedMethod::DpInfinite),
        Method::Learned(LearnedMethod::QStopping),
        Method::Learned(LearnedMethod::TopK),
    ]);
    methods
}

pub fn checkpoint_path(out: &Path, method: &Method, pair: &str) -> PathBuf {
    out.join("checkpoints")
        .join(format!("{}-{}.ckpt", method.token(), pair))
}

/// Train a learned method, or load its checkpoint when `reuse` is set and one
/// exists. Freshly trained models are saved to the checkpoint path.
pub fn obtain_estimator(
    kind: &LearnedMethod,
    cfg: &RunConfig,
    train_episodes: &[Episode],
    ckpt: &Path,
    reuse: bool,
) -> Result<Box<dyn DecisionEstimator>> {
    let lc = cfg.learner();
    if reuse && ckpt.exists() {
        let model: Box<dyn DecisionEstimator> = match kind {
            LearnedMethod::Brr => Box::new(BrrModel::load(ckpt, &lc)?),
            LearnedMethod::DpFinite | LearnedMethod::DpInfinite => {
                Box::new(ValueModel::load(ckpt, &lc)?)
            }
            LearnedMethod::QStopping => Box::new(QStoppingModel::load(ckpt, &lc)?),
            LearnedMethod::Dqn(_) => Box::new(QModel::load(ckpt, &lc)?),
            LearnedMethod::Il(_) => Box::new(ImitationModel::load(ckpt, &lc)?),
            LearnedMethod::TopK => Box::new(TopKModel::load(ckpt, &lc)?),
        };
        return Ok(model);
    }
    if let Some(dir) = ckpt.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let model: Box<dyn DecisionEstimator> = match kind {
        LearnedMethod::Brr => {
            let m = train_brr(train_episodes, &lc)?;
            m.save(ckpt)?;
            Box::new(m)
        }
        LearnedMethod::DpFinite => {
            let m = train_value(train_episodes, HorizonMode::Finite, &lc)?;
            m.save(ckpt)?;
            Box::new(m)
        }
        LearnedMethod::DpInfinite => {
            let m = train_value(train_episodes, HorizonMode::Infinite, &lc)?;
            m.save(ckpt)?;
            Box::new(m)
        }
        LearnedMethod::QStopping => {
            let m = train_q_stopping(train_episodes, &lc)?;
            m.save(ckpt)?;
            Box::new(m)
        }
        LearnedMethod::Dqn(kind) => {
            let dqn_cfg = DqnConfig {
                base: lc,
                train_freq: cfg.train_freq,
                ..Default::default()
            };
            let m = train_dqn(train_episodes, *kind, &dqn_cfg)?;
            m.save(ckpt)?;
            Box::new(m)
        }
        LearnedMethod::Il(il) => {
            let variant = match il {
                IlKind::Vanilla => ImitationVariant::Vanilla,
                IlKind::Downsample => ImitationVariant::Downsample,
                IlKind::Focal => ImitationVariant::Focal { gamma: cfg.gamma },
            };
            let m = train_imitation(train_episodes, variant, &lc)?;
            m.save(ckpt)?;
            Box::new(m)
        }
        LearnedMethod::TopK => {
            let m = train_topk(train_episodes, cfg.k, &lc)?;
            m.save(ckpt)?;
            Box::new(m)
        }
    };
    Ok(model)
}

pub fn split_episodes<'a>(splits: &'a EpisodeSplits, name: &str) -> Result<&'a [Episode]> {
    Ok(match name {
        "train" => &splits.train,
        "validation" => &splits.validation,
        "test" => &splits.test,
        other => bail!("unknown split {other:?}"),
    })
}

/// Evaluate one method over the chosen split. Learned methods and the Sell-AT
/// baseline go through per-episode threshold calibration; direct policies map
/// straight onto the backtester.
pub fn evaluate_method(
    method: &Method,
    cfg: &RunConfig,
    splits: &EpisodeSplits,
    pool: &[Episode],
    reuse: bool,
) -> Result<Vec<EpisodeResult>> {
    let eval = split_episodes(splits, &cfg.split)?;
    let bt = cfg.backtest();
    let results = match method {
        Method::Naive(strategy) => eval.iter().map(|ep| run_episode(strategy, ep, bt)).collect(),
        Method::Indicator(spec) => eval.iter().map(|ep| run_episode(spec, ep, bt)).collect(),
        Method::Oracle => eval
            .iter()
            .map(|ep| run_episode(&OraclePolicy, ep, bt))
            .collect(),
        Method::OracleN(n) => {
            let policy = OracleNPolicy { n: *n };
            eval.iter().map(|ep| run_episode(&policy, ep, bt)).collect()
        }
        Method::SellAt => evaluate_with_at(
            &CalibrationTarget::Rate,
            eval,
            pool,
            &cfg.calibration(),
            bt,
        )?
        .into_iter()
        .map(|o| o.result)
        .collect(),
        Method::Learned(kind) => {
            let ckpt = checkpoint_path(&cfg.out, method, &cfg.pair);
            let estimator = obtain_estimator(kind, cfg, &splits.train, &ckpt, reuse)?;
            evaluate_with_at(
                &CalibrationTarget::Signal(estimator.as_ref()),
                eval,
                pool,
                &cfg.calibration(),
                bt,
            )?
            .into_iter()
            .map(|o| o.result)
            .collect()
        }
    };
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip() {
        for method in all_methods() {
            let token = method.token();
            assert_eq!(parse_method(&token).unwrap(), method, "{token}");
        }
        assert_eq!(parse_method("oracle").unwrap(), Method::Oracle);
        assert_eq!(parse_method("oracle-n:5").unwrap(), Method::OracleN(5));
        assert!(parse_method("riverboat").is_err());
    }

    #[test]
    fn the_registry_lists_21_methods() {
        assert_eq!(all_methods().len(), 21);
    }
}
