//! Learned estimators of the decision variable d_t (best achievable future
//! normalized rate minus the current rate) built on optimal-stopping
//! formulations: per-timestep backward-recursion regression, finite- and
//! infinite-horizon value approximation, and Q-learning for stopping.

use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::data::{make_state, DataError, Episode};
use crate::nn::{
    sync_target, train_step, AdamState, LossSpec, MlpModel, NnError, TargetModel, TrainSample,
    DEFAULT_LEARNING_RATE,
};
use crate::rng::Rng;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("episodes must share one horizon; saw {0} and {1}")]
    MixedHorizons(usize, usize),
    #[error("horizon {0} too short to train on")]
    HorizonTooShort(usize),
    #[error("degenerate labels: every training action is {0}")]
    DegenerateLabels(&'static str),
    #[error("training diverged: {0}")]
    Diverged(NnError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// The scalar every learned estimator produces: estimated best future rate
/// minus the current rate, on the normalized scale.
#[derive(Clone, Copy, Debug)]
pub struct DecisionSignal {
    pub d: f64,
    pub source: &'static str,
}

/// A trained model that can score any (episode, step) it was shaped for.
/// Estimators are immutable once trained, so they are required to be
/// shareable across evaluation threads.
pub trait DecisionEstimator: Send + Sync {
    fn decision(&self, episode: &Episode, t: usize) -> DecisionSignal;

    fn name(&self) -> String;
}

/// Hyperparameters shared by every learner. Defaults follow the common
/// protocol: lr 0.003, batch 128, and two hidden layers of 256 and 128 units.
#[derive(Clone, Copy, Debug)]
pub struct LearnerConfig {
    /// Past-rate window length n.
    pub window_n: usize,
    /// Number of true future rates appended to the state (0 = off).
    pub augment_m: usize,
    pub hidden: [usize; 2],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Target-network sync cadence in training steps.
    pub sync_every: usize,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            window_n: 10,
            augment_m: 0,
            hidden: [256, 128],
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 128,
            epochs: 30,
            sync_every: 200,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn feature_dim(&self, with_time: bool) -> usize {
        self.window_n + self.augment_m + with_time as usize
    }

    fn dims(&self, with_time: bool, outputs: usize) -> Vec<usize> {
        vec![
            self.feature_dim(with_time),
            self.hidden[0],
            self.hidden[1],
            outputs,
        ]
    }
}

/// Shared horizon of a non-empty episode set.
pub(crate) fn common_horizon(episodes: &[Episode]) -> Result<usize, TrainError> {
    let first = episodes.first().ok_or(TrainError::EmptyTrainingSet)?;
    let horizon = first.horizon();
    for ep in episodes {
        if ep.horizon() != horizon {
            return Err(TrainError::MixedHorizons(horizon, ep.horizon()));
        }
    }
    Ok(horizon)
}

pub(crate) fn features(
    episode: &Episode,
    t: usize,
    cfg: &LearnerConfig,
    time_scale: Option<usize>,
) -> Vec<f64> {
    make_state(episode, t, cfg.window_n, cfg.augment_m)
        .expect("step within horizon")
        .features(time_scale)
}

/// Exact value recursion for a known (deterministic) rate path:
/// `Y[T-1] = X[T-1]`, `Y[t] = max(X[t], Y[t+1])`. The learned estimators are
/// checked against this reference.
pub fn snell_values(rates: &[f64]) -> Vec<f64> {
    assert!(!rates.is_empty());
    let mut values = rates.to_vec();
    for t in (0..rates.len() - 1).rev() {
        values[t] = rates[t].max(values[t + 1]);
    }
    values
}

fn shuffled_batches(
    count: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> impl Iterator<Item = Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    let batch = batch_size.max(1);
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= order.len() {
            return None;
        }
        let end = (start + batch).min(order.len());
        let chunk = order[start..end].to_vec();
        start = end;
        Some(chunk)
    })
}

fn run_regression(
    net: &mut MlpModel,
    inputs: &[Vec<f64>],
    targets: &[f64],
    cfg: &LearnerConfig,
    rng: &mut Rng,
) -> Result<(), TrainError> {
    let mut opt = AdamState::new(net, cfg.learning_rate);
    for _ in 0..cfg.epochs {
        for batch_idx in shuffled_batches(inputs.len(), cfg.batch_size, rng) {
            let batch: Vec<TrainSample> = batch_idx
                .iter()
                .map(|&i| TrainSample {
                    input: inputs[i].clone(),
                    target: vec![targets[i]],
                    loss: LossSpec::Mse,
                })
                .collect();
            train_step(net, &mut opt, &batch).map_err(divergence)?;
        }
    }
    Ok(())
}

fn divergence(err: NnError) -> TrainError {
    match err {
        e @ NnError::NonFiniteLoss { .. } => TrainError::Diverged(e),
        e => TrainError::Nn(e),
    }
}

// ---------------------------------------------------------------------------
// Backward recursion with per-timestep regression
// ---------------------------------------------------------------------------

/// One regression network per timestep s = 1..T-1; the network for time s
/// predicts the stopping value at s from features observed at s-1.
pub struct BrrModel {
    cfg: LearnerConfig,
    horizon: usize,
    /// nets[s-1] is the network for time s.
    nets: Vec<MlpModel>,
}

/// Train the per-timestep networks in reverse time order. The last network
/// regresses directly onto the terminal rate; every earlier network regresses
/// onto max(current rate, next network's frozen estimate).
pub fn train_brr(episodes: &[Episode], cfg: &LearnerConfig) -> Result<BrrModel, TrainError> {
    let horizon = common_horizon(episodes)?;
    if horizon < 2 {
        return Err(TrainError::HorizonTooShort(horizon));
    }
    let mut rng = Rng::seed_from(cfg.seed);
    let mut nets: Vec<Option<MlpModel>> = vec![None; horizon - 1];
    for s in (1..horizon).rev() {
        let mut net = MlpModel::new(&cfg.dims(false, 1), rng.next_u64());
        let inputs: Vec<Vec<f64>> = episodes
            .iter()
            .map(|ep| features(ep, s - 1, cfg, None))
            .collect();
        let targets: Vec<f64> = episodes
            .iter()
            .map(|ep| {
                if s == horizon - 1 {
                    ep.norm(s)
                } else {
                    let next = nets[s].as_ref().expect("trained in reverse order");
                    let estimate = next.forward(&features(ep, s, cfg, None)).expect("shape")[0];
                    ep.norm(s).max(estimate)
                }
            })
            .collect();
        run_regression(&mut net, &inputs, &targets, cfg, &mut rng)?;
        nets[s - 1] = Some(net);
    }
    Ok(BrrModel {
        cfg: *cfg,
        horizon,
        nets: nets.into_iter().map(Option::unwrap).collect(),
    })
}

/// d_t = (network for time t+1 applied to features at t) - current rate.
/// The terminal step has no next network and returns a forced-sell sentinel.
pub fn brr_decision(model: &BrrModel, episode: &Episode, t: usize) -> DecisionSignal {
    assert_eq!(episode.horizon(), model.horizon, "horizon mismatch");
    if t + 1 >= model.horizon {
        return DecisionSignal {
            d: f64::NEG_INFINITY,
            source: "brr",
        };
    }
    let input = features(episode, t, &model.cfg, None);
    let estimate = model.nets[t].forward(&input).expect("shape")[0];
    DecisionSignal {
        d: estimate - episode.norm(t),
        source: "brr",
    }
}

impl DecisionEstimator for BrrModel {
    fn decision(&self, episode: &Episode, t: usize) -> DecisionSignal {
        brr_decision(self, episode, t)
    }

    fn name(&self) -> String {
        "brr".into()
    }
}

impl BrrModel {
    pub fn network_count(&self) -> usize {
        self.nets.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "brr v1")?;
        writeln!(w, "horizon {}", self.horizon)?;
        writeln!(w, "window_n {}", self.cfg.window_n)?;
        writeln!(w, "augment_m {}", self.cfg.augment_m)?;
        for net in &self.nets {
            net.write_into(&mut w)?;
        }
        Ok(())
    }

    pub fn load(path: &Path, cfg: &LearnerConfig) -> Result<BrrModel, NnError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        expect_line(&mut r, "brr v1")?;
        let horizon: usize = parse_kv(&mut r, "horizon")?;
        let window_n: usize = parse_kv(&mut r, "window_n")?;
        let augment_m: usize = parse_kv(&mut r, "augment_m")?;
        let mut cfg = *cfg;
        cfg.window_n = window_n;
        cfg.augment_m = augment_m;
        let nets = (1..horizon)
            .map(|_| MlpModel::read_from(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BrrModel { cfg, horizon, nets })
    }
}

pub(crate) fn expect_line<R: BufRead>(r: &mut R, want: &str) -> Result<(), NnError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != want {
        return Err(NnError::Checkpoint(format!(
            "expected {want:?}, got {:?}",
            line.trim()
        )));
    }
    Ok(())
}

pub(crate) fn parse_kv<R: BufRead, T: std::str::FromStr>(
    r: &mut R,
    key: &str,
) -> Result<T, NnError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(NnError::Checkpoint(format!(
            "expected key {key:?} in {:?}",
            line.trim()
        )));
    }
    parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| NnError::Checkpoint(format!("bad value for {key:?}")))
}

// ---------------------------------------------------------------------------
// Value-function approximation (finite and infinite horizon)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HorizonMode {
    /// One network over (state, t/T); the bootstrap is zeroed on transitions
    /// into the terminal step.
    Finite,
    /// Stationary value; time never enters the input.
    Infinite,
}

impl HorizonMode {
    fn token(&self) -> &'static str {
        match self {
            HorizonMode::Finite => "dp-finite",
            HorizonMode::Infinite => "dp-infinite",
        }
    }
}

/// Single-output hold-value network V(s) trained against bootstrapped
/// max(next rate, target-network value) samples.
pub struct ValueModel {
    cfg: LearnerConfig,
    mode: HorizonMode,
    horizon: usize,
    net: MlpModel,
}

struct Transition {
    input: Vec<f64>,
    next_input: Vec<f64>,
    next_rate: f64,
    next_is_terminal: bool,
}

fn collect_transitions(
    episodes: &[Episode],
    cfg: &LearnerConfig,
    time_scale: Option<usize>,
) -> Result<Vec<Transition>, TrainError> {
    let horizon = common_horizon(episodes)?;
    if horizon < 2 {
        return Err(TrainError::HorizonTooShort(horizon));
    }
    let mut out = Vec::with_capacity(episodes.len() * (horizon - 1));
    for ep in episodes {
        for t in 0..horizon - 1 {
            out.push(Transition {
                input: features(ep, t, cfg, time_scale),
                next_input: features(ep, t + 1, cfg, time_scale),
                next_rate: ep.norm(t + 1),
                next_is_terminal: t + 1 == horizon - 1,
            });
        }
    }
    Ok(out)
}

/// Fit a hold-value network on shuffled transitions with a periodically
/// synced target network. `bootstrap_at_terminal` controls whether the
/// target-network estimate still enters the backup on transitions into the
/// final step.
fn train_bootstrapped_value(
    episodes: &[Episode],
    cfg: &LearnerConfig,
    time_scale: Option<usize>,
    bootstrap_at_terminal: bool,
) -> Result<(MlpModel, usize), TrainError> {
    let horizon = common_horizon(episodes)?;
    let transitions = collect_transitions(episodes, cfg, time_scale)?;
    let mut net = MlpModel::new(&cfg.dims(time_scale.is_some(), 1), cfg.seed);
    let mut opt = AdamState::new(&net, cfg.learning_rate);
    let mut target = TargetModel::snapshot(&net);
    let mut rng = Rng::seed_from(cfg.seed ^ 0x5ee0_7ab1e);
    for _ in 0..cfg.epochs {
        for batch_idx in shuffled_batches(transitions.len(), cfg.batch_size, &mut rng) {
            debug_assert!(target.staleness() < cfg.sync_every);
            let batch: Vec<TrainSample> = batch_idx
                .iter()
                .map(|&i| {
                    let tr = &transitions[i];
                    let bootstrap = if tr.next_is_terminal && !bootstrap_at_terminal {
                        0.0
                    } else {
                        target.forward(&tr.next_input).expect("shape")[0]
                    };
                    TrainSample {
                        input: tr.input.clone(),
                        target: vec![tr.next_rate.max(bootstrap)],
                        loss: LossSpec::Mse,
                    }
                })
                .collect();
            train_step(&mut net, &mut opt, &batch).map_err(divergence)?;
            target.tick();
            if target.staleness() >= cfg.sync_every {
                sync_target(&net, &mut target)?;
            }
        }
    }
    Ok((net, horizon))
}

pub fn train_value(
    episodes: &[Episode],
    mode: HorizonMode,
    cfg: &LearnerConfig,
) -> Result<ValueModel, TrainError> {
    let time_scale = match mode {
        HorizonMode::Finite => Some(common_horizon(episodes)?),
        HorizonMode::Infinite => None,
    };
    let (net, horizon) = train_bootstrapped_value(
        episodes,
        cfg,
        time_scale,
        mode == HorizonMode::Infinite,
    )?;
    Ok(ValueModel {
        cfg: *cfg,
        mode,
        horizon,
        net,
    })
}

/// d_t = estimated hold value minus the current rate.
pub fn value_decision(model: &ValueModel, episode: &Episode, t: usize) -> DecisionSignal {
    let time_scale = match model.mode {
        HorizonMode::Finite => Some(model.horizon),
        HorizonMode::Infinite => None,
    };
    let input = features(episode, t, &model.cfg, time_scale);
    let value = model.net.forward(&input).expect("shape")[0];
    DecisionSignal {
        d: value - episode.norm(t),
        source: model.mode.token(),
    }
}

impl DecisionEstimator for ValueModel {
    fn decision(&self, episode: &Episode, t: usize) -> DecisionSignal {
        value_decision(self, episode, t)
    }

    fn name(&self) -> String {
        self.mode.token().into()
    }
}

impl ValueModel {
    pub fn hold_value(&self, episode: &Episode, t: usize) -> f64 {
        self.decision(episode, t).d + episode.norm(t)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "value v1")?;
        writeln!(w, "mode {}", self.mode.token())?;
        writeln!(w, "horizon {}", self.horizon)?;
        writeln!(w, "window_n {}", self.cfg.window_n)?;
        writeln!(w, "augment_m {}", self.cfg.augment_m)?;
        self.net.write_into(&mut w)
    }

    pub fn load(path: &Path, cfg: &LearnerConfig) -> Result<ValueModel, NnError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        expect_line(&mut r, "value v1")?;
        let mode_token: String = parse_kv(&mut r, "mode")?;
        let mode = match mode_token.as_str() {
            "dp-finite" => HorizonMode::Finite,
            "dp-infinite" => HorizonMode::Infinite,
            other => return Err(NnError::Checkpoint(format!("unknown mode {other:?}"))),
        };
        let horizon: usize = parse_kv(&mut r, "horizon")?;
        let window_n: usize = parse_kv(&mut r, "window_n")?;
        let augment_m: usize = parse_kv(&mut r, "augment_m")?;
        let mut cfg = *cfg;
        cfg.window_n = window_n;
        cfg.augment_m = augment_m;
        let net = MlpModel::read_from(&mut r)?;
        Ok(ValueModel {
            cfg,
            mode,
            horizon,
            net,
        })
    }
}

// ---------------------------------------------------------------------------
// Q-learning for optimal stopping
// ---------------------------------------------------------------------------

/// Only the hold branch is learned; the sell value is the observed rate by
/// definition and is read straight from the state.
pub struct QStoppingModel {
    cfg: LearnerConfig,
    horizon: usize,
    net: MlpModel,
}

pub fn train_q_stopping(
    episodes: &[Episode],
    cfg: &LearnerConfig,
) -> Result<QStoppingModel, TrainError> {
    // Bootstrap target max(h(s'), Q(s', hold)); transitions into the terminal
    // step back up the observed rate only.
    let (net, horizon) = train_bootstrapped_value(episodes, cfg, None, false)?;
    Ok(QStoppingModel {
        cfg: *cfg,
        horizon,
        net,
    })
}

/// d_t = Q(s, hold) - h(s).
pub fn q_stopping_decision(model: &QStoppingModel, episode: &Episode, t: usize) -> DecisionSignal {
    let input = features(episode, t, &model.cfg, None);
    let hold = model.net.forward(&input).expect("shape")[0];
    DecisionSignal {
        d: hold - episode.norm(t),
        source: "q-stopping",
    }
}

impl DecisionEstimator for QStoppingModel {
    fn decision(&self, episode: &Episode, t: usize) -> DecisionSignal {
        q_stopping_decision(self, episode, t)
    }

    fn name(&self) -> String {
        "q-stopping".into()
    }
}

impl QStoppingModel {
    pub fn hold_value(&self, episode: &Episode, t: usize) -> f64 {
        self.decision(episode, t).d + episode.norm(t)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "qstop v1")?;
        writeln!(w, "horizon {}", self.horizon)?;
        writeln!(w, "window_n {}", self.cfg.window_n)?;
        writeln!(w, "augment_m {}", self.cfg.augment_m)?;
        self.net.write_into(&mut w)
    }

    pub fn load(path: &Path, cfg: &LearnerConfig) -> Result<QStoppingModel, NnError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        expect_line(&mut r, "qstop v1")?;
        let horizon: usize = parse_kv(&mut r, "horizon")?;
        let window_n: usize = parse_kv(&mut r, "window_n")?;
        let augment_m: usize = parse_kv(&mut r, "augment_m")?;
        let mut cfg = *cfg;
        cfg.window_n = window_n;
        cfg.augment_m = augment_m;
        let net = MlpModel::read_from(&mut r)?;
        Ok(QStoppingModel { cfg, horizon, net })
    }
}
