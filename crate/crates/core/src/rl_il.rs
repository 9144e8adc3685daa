//! DQN agents under three reward definitions, and imitation-learning
//! classifiers trained against oracle actions (vanilla, downsampled, focal).

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use crate::baselines::Action;
use crate::data::Episode;
use crate::nn::{
    sync_target, train_step, AdamState, LossSpec, MlpModel, NnError, TargetModel, TrainSample,
};
use crate::rng::Rng;
use crate::stopping::{
    common_horizon, expect_line, features, parse_kv, DecisionEstimator, DecisionSignal,
    LearnerConfig, TrainError,
};

/// Training-time reward definition for the DQN agents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    /// a * X_t.
    Vanilla,
    /// a * reverse rank of X_t within the episode (largest rate gets rank T).
    Ranking,
    /// 1 when the action matches the oracle's, else 0.
    Binary,
}

impl RewardKind {
    pub fn token(&self) -> &'static str {
        match self {
            RewardKind::Vanilla => "dqn",
            RewardKind::Ranking => "dqn-rank",
            RewardKind::Binary => "dqn-binary",
        }
    }
}

/// Reverse rank of the rate at step t among the episode's rates: 1 + the
/// number of strictly smaller rates, so the largest gets T.
fn reverse_rank(episode: &Episode, t: usize) -> f64 {
    let x = episode.norm(t);
    let below = episode.norm_rates.iter().filter(|&&v| v < x).count();
    (below + 1) as f64
}

pub fn compute_reward(kind: RewardKind, episode: &Episode, t: usize, action: Action) -> f64 {
    match kind {
        RewardKind::Vanilla => match action {
            Action::Sell => episode.norm(t),
            Action::Hold => 0.0,
        },
        RewardKind::Ranking => match action {
            Action::Sell => reverse_rank(episode, t),
            Action::Hold => 0.0,
        },
        RewardKind::Binary => (action == oracle_action_at(episode, t)) as u8 as f64,
    }
}

/// Oracle action at one step: sell iff the current rate is at least every
/// strictly later rate (the empty max at the final step forces a sell).
fn oracle_action_at(episode: &Episode, t: usize) -> Action {
    let future_max = episode.norm_rates[t + 1..]
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if episode.norm(t) >= future_max {
        Action::Sell
    } else {
        Action::Hold
    }
}

/// Full-episode oracle action sequence (training-time labels).
pub fn oracle_actions(episode: &Episode) -> Vec<Action> {
    let horizon = episode.horizon();
    let mut actions = vec![Action::Hold; horizon];
    let mut future_max = f64::NEG_INFINITY;
    for t in (0..horizon).rev() {
        if episode.norm(t) >= future_max {
            actions[t] = Action::Sell;
        }
        future_max = future_max.max(episode.norm(t));
    }
    actions
}

#[derive(Clone, Debug)]
pub struct DqnConfig {
    pub base: LearnerConfig,
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps between gradient updates.
    pub train_freq: usize,
    /// Scale rewards by the FC balance accumulated along the rollout.
    pub delta_weighted: bool,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            base: LearnerConfig::default(),
            replay_capacity: 50_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            train_freq: 4,
            delta_weighted: false,
        }
    }
}

/// Double-DQN agent with two outputs: Q(s, hold) and Q(s, sell).
pub struct QModel {
    cfg: LearnerConfig,
    kind: RewardKind,
    horizon: usize,
    net: MlpModel,
}

const HOLD: usize = 0;
const SELL: usize = 1;

struct Replay {
    input: Vec<f64>,
    action: usize,
    reward: f64,
    /// None when the backup terminates here (a sell, or the final step).
    next_input: Option<Vec<f64>>,
}

/// Epsilon-greedy rollouts over the training episodes feed a uniform replay
/// buffer; updates use the double-DQN target with no discounting. A sell
/// stops the value backup (the sell branch's worth is the collected reward)
/// while the rollout itself keeps stepping and re-accumulating revenue.
pub fn train_dqn(
    episodes: &[Episode],
    kind: RewardKind,
    cfg: &DqnConfig,
) -> Result<QModel, TrainError> {
    let horizon = common_horizon(episodes)?;
    let base = &cfg.base;
    let mut net = MlpModel::new(
        &[base.feature_dim(false), base.hidden[0], base.hidden[1], 2],
        base.seed,
    );
    let mut opt = AdamState::new(&net, base.learning_rate);
    let mut target = TargetModel::snapshot(&net);
    let mut rng = Rng::seed_from(base.seed ^ 0xd9_4e17);
    let mut buffer: VecDeque<Replay> = VecDeque::with_capacity(cfg.replay_capacity.min(1 << 16));

    let total_steps = (base.epochs * episodes.len() * horizon).max(1);
    let decay_steps = (total_steps / 2).max(1);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..episodes.len()).collect();

    for _ in 0..base.epochs {
        rng.shuffle(&mut order);
        for &ep_idx in &order {
            let episode = &episodes[ep_idx];
            let mut balance = 0.0;
            for t in 0..horizon {
                balance += 1.0;
                let input = features(episode, t, base, None);
                let epsilon = (cfg.epsilon_start
                    - (cfg.epsilon_start - cfg.epsilon_end) * step as f64 / decay_steps as f64)
                    .max(cfg.epsilon_end);
                let action_idx = if rng.bernoulli(epsilon) {
                    rng.below(2)
                } else {
                    let q = net.forward(&input).expect("shape");
                    (q[SELL] > q[HOLD]) as usize
                };
                let action = if action_idx == SELL { Action::Sell } else { Action::Hold };
                let mut reward = compute_reward(kind, episode, t, action);
                if cfg.delta_weighted {
                    reward *= balance;
                }
                if action == Action::Sell {
                    balance = 0.0;
                }
                let next_input = (action != Action::Sell && t + 1 < horizon)
                    .then(|| features(episode, t + 1, base, None));
                if buffer.len() == cfg.replay_capacity {
                    buffer.pop_front();
                }
                buffer.push_back(Replay {
                    input,
                    action: action_idx,
                    reward,
                    next_input,
                });
                step += 1;

                if step.is_multiple_of(cfg.train_freq.max(1)) && buffer.len() >= base.batch_size {
                    debug_assert!(target.staleness() < base.sync_every);
                    let batch: Vec<TrainSample> = (0..base.batch_size)
                        .map(|_| {
                            let r = &buffer[rng.below(buffer.len())];
                            let mut y = r.reward;
                            if let Some(next) = &r.next_input {
                                let online = net.forward(next).expect("shape");
                                let best = (online[SELL] > online[HOLD]) as usize;
                                y += target.forward(next).expect("shape")[best];
                            }
                            let mut target_vec = net.forward(&r.input).expect("shape");
                            target_vec[r.action] = y;
                            TrainSample {
                                input: r.input.clone(),
                                target: target_vec,
                                loss: LossSpec::Mse,
                            }
                        })
                        .collect();
                    train_step(&mut net, &mut opt, &batch).map_err(|e| match e {
                        d @ NnError::NonFiniteLoss { .. } => TrainError::Diverged(d),
                        other => TrainError::Nn(other),
                    })?;
                    target.tick();
                    if target.staleness() >= base.sync_every {
                        sync_target(&net, &mut target)?;
                    }
                }
            }
        }
    }
    Ok(QModel {
        cfg: *base,
        kind,
        horizon,
        net,
    })
}

/// d = Q(s, hold) - Q(s, sell); the zero threshold reproduces the argmax
/// policy.
pub fn dqn_decision(model: &QModel, episode: &Episode, t: usize) -> DecisionSignal {
    let q = model.q_values(episode, t);
    DecisionSignal {
        d: q[HOLD] - q[SELL],
        source: model.kind.token(),
    }
}

impl QModel {
    pub fn q_values(&self, episode: &Episode, t: usize) -> Vec<f64> {
        let input = features(episode, t, &self.cfg, None);
        self.net.forward(&input).expect("shape")
    }

    pub fn reward_kind(&self) -> RewardKind {
        self.kind
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "dqn v1")?;
        writeln!(w, "kind {}", self.kind.token())?;
        writeln!(w, "horizon {}", self.horizon)?;
        writeln!(w, "window_n {}", self.cfg.window_n)?;
        writeln!(w, "augment_m {}", self.cfg.augment_m)?;
        self.net.write_into(&mut w)
    }

    pub fn load(path: &Path, cfg: &LearnerConfig) -> Result<QModel, NnError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        expect_line(&mut r, "dqn v1")?;
        let token: String = parse_kv(&mut r, "kind")?;
        let kind = match token.as_str() {
            "dqn" => RewardKind::Vanilla,
            "dqn-rank" => RewardKind::Ranking,
            "dqn-binary" => RewardKind::Binary,
            other => return Err(NnError::Checkpoint(format!("unknown reward kind {other:?}"))),
        };
        let horizon: usize = parse_kv(&mut r, "horizon")?;
        let window_n: usize = parse_kv(&mut r, "window_n")?;
        let augment_m: usize = parse_kv(&mut r, "augment_m")?;
        let mut cfg = *cfg;
        cfg.window_n = window_n;
        cfg.augment_m = augment_m;
        let net = MlpModel::read_from(&mut r)?;
        Ok(QModel {
            cfg,
            kind,
            horizon,
            net,
        })
    }
}

impl DecisionEstimator for QModel {
    fn decision(&self, episode: &Episode, t: usize) -> DecisionSignal {
        dqn_decision(self, episode, t)
    }

    fn name(&self) -> String {
        self.kind.token().into()
    }
}

/// How the class imbalance in oracle labels is handled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ImitationVariant {
    Vanilla,
    Downsample,
    Focal { gamma: f64 },
}

impl ImitationVariant {
    pub fn token(&self) -> &'static str {
        match self {
            ImitationVariant::Vanilla => "il",
            ImitationVariant::Downsample => "il-down",
            ImitationVariant::Focal { .. } => "il-focal",
        }
    }
}

/// Binary classifier with one logistic output: probability of Sell.
pub struct ImitationModel {
    cfg: LearnerConfig,
    variant: ImitationVariant,
    net: MlpModel,
}

/// Per-epoch indices with the majority class subsampled to a 1:1 ratio.
pub(crate) fn balanced_indices(labels: &[bool], rng: &mut Rng) -> Vec<usize> {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| labels[i]);
    let keep = pos.len().min(neg.len());
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let mut out: Vec<usize> = pos.into_iter().take(keep).collect();
    out.extend(neg.into_iter().take(keep));
    out
}

pub fn train_imitation(
    episodes: &[Episode],
    variant: ImitationVariant,
    cfg: &LearnerConfig,
) -> Result<ImitationModel, TrainError> {
    common_horizon(episodes)?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for ep in episodes {
        let actions = oracle_actions(ep);
        for (t, action) in actions.iter().enumerate() {
            inputs.push(features(ep, t, cfg, None));
            labels.push(*action == Action::Sell);
        }
    }
    if labels.iter().all(|&l| l) {
        return Err(TrainError::DegenerateLabels("sell"));
    }
    if labels.iter().all(|&l| !l) {
        return Err(TrainError::DegenerateLabels("hold"));
    }

    let loss = match variant {
        ImitationVariant::Focal { gamma } => LossSpec::Focal { gamma },
        _ => LossSpec::CrossEntropy,
    };
    let mut net = MlpModel::new(
        &[cfg.feature_dim(false), cfg.hidden[0], cfg.hidden[1], 1],
        cfg.seed,
    );
    let mut opt = AdamState::new(&net, cfg.learning_rate);
    let mut rng = Rng::seed_from(cfg.seed ^ 0x11_7ab5);
    for _ in 0..cfg.epochs {
        let mut order = match variant {
            ImitationVariant::Downsample => balanced_indices(&labels, &mut rng),
            _ => (0..labels.len()).collect(),
        };
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| TrainSample {
                    input: inputs[i].clone(),
                    target: vec![labels[i] as u8 as f64],
                    loss,
                })
                .collect();
            train_step(&mut net, &mut opt, &batch).map_err(|e| match e {
                d @ NnError::NonFiniteLoss { .. } => TrainError::Diverged(d),
                other => TrainError::Nn(other),
            })?;
        }
    }
    Ok(ImitationModel {
        cfg: *cfg,
        variant,
        net,
    })
}

/// d = 0.5 - P(sell), so a sell probability above one half sells at the zero
/// threshold.
pub fn il_decision(model: &ImitationModel, episode: &Episode, t: usize) -> DecisionSignal {
    DecisionSignal {
        d: 0.5 - model.prob_sell(episode, t),
        source: model.variant.token(),
    }
}

impl ImitationModel {
    pub fn prob_sell(&self, episode: &Episode, t: usize) -> f64 {
        let input = features(episode, t, &self.cfg, None);
        let logit = self.net.forward(&input).expect("shape")[0];
        1.0 / (1.0 + (-logit).exp())
    }

    pub fn variant(&self) -> ImitationVariant {
        self.variant
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "il v1")?;
        writeln!(w, "variant {}", self.variant.token())?;
        let gamma = match self.variant {
            ImitationVariant::Focal { gamma } => gamma,
            _ => 0.0,
        };
        writeln!(w, "gamma {gamma}")?;
        writeln!(w, "window_n {}", self.cfg.window_n)?;
        writeln!(w, "augment_m {}", self.cfg.augment_m)?;
        self.net.write_into(&mut w)
    }

    pub fn load(path: &Path, cfg: &LearnerConfig) -> Result<ImitationModel, NnError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        expect_line(&mut r, "il v1")?;
        let token: String = parse_kv(&mut r, "variant")?;
        let gamma: f64 = parse_kv(&mut r, "gamma")?;
        let variant = match token.as_str() {
            "il" => ImitationVariant::Vanilla,
            "il-down" => ImitationVariant::Downsample,
            "il-focal" => ImitationVariant::Focal { gamma },
            other => return Err(NnError::Checkpoint(format!("unknown variant {other:?}"))),
        };
        let window_n: usize = parse_kv(&mut r, "window_n")?;
        let augment_m: usize = parse_kv(&mut r, "augment_m")?;
        let mut cfg = *cfg;
        cfg.window_n = window_n;
        cfg.augment_m = augment_m;
        let net = MlpModel::read_from(&mut r)?;
        Ok(ImitationModel { cfg, variant, net })
    }
}

impl DecisionEstimator for ImitationModel {
    fn decision(&self, episode: &Episode, t: usize) -> DecisionSignal {
        il_decision(self, episode, t)
    }

    fn name(&self) -> String {
        self.variant.token().into()
    }
}
