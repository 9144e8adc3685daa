//! Multi-task regression of the top-K future normalized rates. The K head
//! outputs are averaged into a single estimate of the best achievable future
//! rate; unlike the bootstrapped value learners, every training target is a
//! directly observed rate.

use std::io::Write;
use std::path::Path;

use crate::data::Episode;
use crate::nn::{
    train_step, AdamState, LossSpec, MlpModel, NnError, TrainSample,
};
use crate::rng::Rng;
use crate::stopping::{
    common_horizon, expect_line, features, parse_kv, DecisionEstimator, DecisionSignal,
    LearnerConfig, TrainError,
};

/// The J = min(K, T-1-t) largest rates among the episode's strictly-future
/// rates, sorted rank-1 (largest) first.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKTargets {
    pub values: Vec<f64>,
    pub j: usize,
}

impl TopKTargets {
    /// Mean of the targets (the quantity the averaged heads estimate).
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.j as f64
    }
}

/// Largest J future rates after step t, descending. The final step has no
/// future and is an error; the backtester forces the terminal sale instead.
pub fn topk_targets(episode: &Episode, t: usize, k: usize) -> Result<TopKTargets, TrainError> {
    assert!(k >= 1, "k must be at least 1");
    let horizon = episode.horizon();
    if t + 1 >= horizon {
        return Err(TrainError::HorizonTooShort(horizon));
    }
    let mut future: Vec<f64> = episode.norm_rates[t + 1..].to_vec();
    future.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let j = k.min(future.len());
    future.truncate(j);
    Ok(TopKTargets { values: future, j })
}

/// K-head forecaster of the top-K future rates.
pub struct TopKModel {
    cfg: LearnerConfig,
    k: usize,
    net: MlpModel,
}

type Samples = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn collect_samples(
    episodes: &[Episode],
    k: usize,
    cfg: &LearnerConfig,
) -> Result<Samples, TrainError> {
    let horizon = common_horizon(episodes)?;
    if horizon < 2 {
        return Err(TrainError::HorizonTooShort(horizon));
    }
    let mut inputs = Vec::with_capacity(episodes.len() * (horizon - 1));
    let mut targets = Vec::with_capacity(inputs.capacity());
    for ep in episodes {
        for t in 0..horizon - 1 {
            inputs.push(features(ep, t, cfg, None));
            targets.push(topk_targets(ep, t, k)?.values);
        }
    }
    Ok((inputs, targets))
}

fn fit_heads(
    episodes: &[Episode],
    k: usize,
    cfg: &LearnerConfig,
    loss: LossSpec,
) -> Result<MlpModel, TrainError> {
    let (inputs, targets) = collect_samples(episodes, k, cfg)?;
    let mut net = MlpModel::new(
        &[cfg.feature_dim(false), cfg.hidden[0], cfg.hidden[1], k],
        cfg.seed,
    );
    let mut opt = AdamState::new(&net, cfg.learning_rate);
    let mut rng = Rng::seed_from(cfg.seed ^ 0x70_9c4a);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| TrainSample {
                    input: inputs[i].clone(),
                    target: targets[i].clone(),
                    loss,
                })
                .collect();
            train_step(&mut net, &mut opt, &batch).map_err(|e| match e {
                d @ NnError::NonFiniteLoss { .. } => TrainError::Diverged(d),
                other => TrainError::Nn(other),
            })?;
        }
    }
    Ok(net)
}

/// Rank-weighted multi-task fit: head k trains only against rank-k targets,
/// truncated near the episode end. Targets are observed rates, never model
/// outputs.
pub fn train_topk(
    episodes: &[Episode],
    k: usize,
    cfg: &LearnerConfig,
) -> Result<TopKModel, TrainError> {
    let net = fit_heads(episodes, k, cfg, LossSpec::WeightedTopK)?;
    Ok(TopKModel { cfg: *cfg, k, net })
}

/// Single-output regression straight onto the maximum future rate. With a
/// shared seed this walks the same parameter trajectory as `train_topk` at
/// K = 1.
pub fn train_max_regression(
    episodes: &[Episode],
    cfg: &LearnerConfig,
) -> Result<TopKModel, TrainError> {
    let net = fit_heads(episodes, 1, cfg, LossSpec::Mse)?;
    Ok(TopKModel { cfg: *cfg, k: 1, net })
}

/// d = mean of the K heads minus the current rate.
pub fn topk_decision(model: &TopKModel, episode: &Episode, t: usize) -> DecisionSignal {
    DecisionSignal {
        d: model.w_estimate(episode, t) - episode.norm(t),
        source: "topk",
    }
}

impl TopKModel {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Head outputs at (episode, t), rank-1 first.
    pub fn heads(&self, episode: &Episode, t: usize) -> Vec<f64> {
        let input = features(episode, t, &self.cfg, None);
        self.net.forward(&input).expect("shape")
    }

    /// Average of the K heads: the estimated best achievable future rate.
    pub fn w_estimate(&self, episode: &Episode, t: usize) -> f64 {
        let heads = self.heads(episode, t);
        heads.iter().sum::<f64>() / heads.len() as f64
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.net.params_flat()
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "topk v1")?;
        writeln!(w, "k {}", self.k)?;
        writeln!(w, "window_n {}", self.cfg.window_n)?;
        writeln!(w, "augment_m {}", self.cfg.augment_m)?;
        self.net.write_into(&mut w)
    }

    pub fn load(path: &Path, cfg: &LearnerConfig) -> Result<TopKModel, NnError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        expect_line(&mut r, "topk v1")?;
        let k: usize = parse_kv(&mut r, "k")?;
        let window_n: usize = parse_kv(&mut r, "window_n")?;
        let augment_m: usize = parse_kv(&mut r, "augment_m")?;
        let mut cfg = *cfg;
        cfg.window_n = window_n;
        cfg.augment_m = augment_m;
        let net = MlpModel::read_from(&mut r)?;
        Ok(TopKModel { cfg, k, net })
    }
}

impl DecisionEstimator for TopKModel {
    fn decision(&self, episode: &Episode, t: usize) -> DecisionSignal {
        topk_decision(self, episode, t)
    }

    fn name(&self) -> String {
        "topk".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn episode(id: usize, rates: &[f64]) -> Episode {
        let d = NaiveDate::from_ymd_opt(2011, 1, 3).unwrap();
        Episode::from_raw(id, d, rates.to_vec()).unwrap()
    }

    fn small_cfg(seed: u64) -> LearnerConfig {
        LearnerConfig {
            window_n: 4,
            hidden: [32, 16],
            epochs: 400,
            batch_size: 32,
            seed,
            ..Default::default()
        }
    }

    fn random_episode(rng: &mut Rng, id: usize, horizon: usize) -> Episode {
        let mut x: f64 = 1.0;
        let rates: Vec<f64> = (0..horizon)
            .map(|_| {
                let v = x;
                x *= rng.range_f64(0.97, 1.031);
                v
            })
            .collect();
        episode(id, &rates)
    }

    #[test]
    fn targets_pick_the_largest_future_rates() {
        let ep = episode(0, &[1.0, 1.1, 1.05, 1.2, 0.9]);
        let t0 = topk_targets(&ep, 0, 3).unwrap();
        assert_eq!(t0.values, vec![1.2, 1.1, 1.05]);
        assert_eq!(t0.j, 3);
        assert!((t0.mean() - (1.2 + 1.1 + 1.05) / 3.0).abs() < 1e-15);

        let t3 = topk_targets(&ep, 3, 3).unwrap();
        assert_eq!(t3.values, vec![0.9]);
        assert_eq!(t3.j, 1);

        let constant = episode(1, &[1.0; 5]);
        assert_eq!(topk_targets(&constant, 1, 3).unwrap().values, vec![1.0; 3]);

        assert!(topk_targets(&ep, 4, 3).is_err());
    }

    #[test]
    fn targets_match_a_full_sort_oracle() {
        let mut rng = Rng::seed_from(7);
        for i in 0..300 {
            let ep = random_episode(&mut rng, i, 12);
            for t in 0..11 {
                for k in 1..=5 {
                    let got = topk_targets(&ep, t, k).unwrap();
                    let mut sorted: Vec<f64> = ep.norm_rates[t + 1..].to_vec();
                    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    let j = k.min(sorted.len());
                    assert_eq!(got.values, sorted[..j].to_vec());
                    assert!(got.values.windows(2).all(|w| w[0] >= w[1]));
                }
            }
        }
    }

    #[test]
    fn rank_one_target_follows_the_suffix_envelope() {
        let mut rng = Rng::seed_from(11);
        for i in 0..100 {
            let ep = random_episode(&mut rng, i, 10);
            for t in 0..8 {
                let here = topk_targets(&ep, t, 1).unwrap().values[0];
                let next = topk_targets(&ep, t + 1, 1).ok().map(|v| v.values[0]);
                let expected = match next {
                    Some(n) => ep.norm(t + 1).max(n),
                    None => ep.norm(t + 1),
                };
                assert_eq!(here, expected, "t={t}");
            }
        }
    }

    #[test]
    fn constant_data_fits_all_heads_to_one() {
        let episodes: Vec<Episode> = (0..16).map(|i| episode(i, &[1.0; 6])).collect();
        let model = train_topk(&episodes, 3, &small_cfg(1)).unwrap();
        for t in 0..5 {
            for head in model.heads(&episodes[0], t) {
                assert!((head - 1.0).abs() < 1e-2, "t={t}, head={head}");
            }
        }
    }

    #[test]
    fn repeated_sequence_heads_converge_to_ranked_suffix_rates() {
        let rates = [1.0, 1.08, 0.95, 1.1, 1.02, 0.9];
        let episodes: Vec<Episode> = (0..16).map(|i| episode(i, &rates)).collect();
        let cfg = LearnerConfig {
            epochs: 1500,
            learning_rate: 0.01,
            ..small_cfg(2)
        };
        let model = train_topk(&episodes, 3, &cfg).unwrap();
        for t in 0..4 {
            let expected = topk_targets(&episodes[0], t, 3).unwrap();
            let heads = model.heads(&episodes[0], t);
            for (k, want) in expected.values.iter().enumerate() {
                assert!(
                    (heads[k] - want).abs() < 2e-2,
                    "t={t} rank={} head={} target={want}",
                    k + 1,
                    heads[k]
                );
            }
        }
    }

    #[test]
    fn k1_training_bit_matches_max_regression() {
        let mut rng = Rng::seed_from(3);
        let episodes: Vec<Episode> = (0..12).map(|i| random_episode(&mut rng, i, 8)).collect();
        let cfg = LearnerConfig {
            epochs: 25,
            ..small_cfg(5)
        };
        let a = train_topk(&episodes, 1, &cfg).unwrap();
        let b = train_max_regression(&episodes, &cfg).unwrap();
        let (pa, pb) = (a.params_flat(), b.params_flat());
        assert_eq!(pa.len(), pb.len());
        assert!(
            pa.iter().zip(pb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "K=1 and max-regression trajectories diverged"
        );
    }

    #[test]
    fn decision_is_head_mean_minus_rate() {
        let episodes: Vec<Episode> = (0..8).map(|i| episode(i, &[1.0, 1.05, 0.97, 1.02])).collect();
        let cfg = LearnerConfig {
            epochs: 2,
            ..small_cfg(6)
        };
        let mut model = train_topk(&episodes, 3, &cfg).unwrap();
        // Constant-output net: heads [1.2, 1.1, 1.0].
        let mut flat = vec![0.0; model.net.param_count()];
        let n = flat.len();
        flat[n - 3] = 1.2;
        flat[n - 2] = 1.1;
        flat[n - 1] = 1.0;
        model.net.set_params_flat(&flat);
        let d = topk_decision(&model, &episodes[0], 0);
        assert!((d.d - 0.1).abs() < 1e-12);

        // Shifting every head by c shifts d by exactly c.
        flat[n - 3] += 0.25;
        flat[n - 2] += 0.25;
        flat[n - 1] += 0.25;
        model.net.set_params_flat(&flat);
        let shifted = topk_decision(&model, &episodes[0], 0);
        assert!((shifted.d - (d.d + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn training_targets_are_observations_not_estimates() {
        // Purity: the sample targets handed to the optimizer are exactly the
        // sorted future observations, independent of any model state.
        let mut rng = Rng::seed_from(9);
        let episodes: Vec<Episode> = (0..10).map(|i| random_episode(&mut rng, i, 8)).collect();
        let cfg = small_cfg(7);
        let (_, targets) = collect_samples(&episodes, 3, &cfg).unwrap();
        let mut idx = 0;
        for ep in &episodes {
            for t in 0..7 {
                assert_eq!(targets[idx], topk_targets(ep, t, 3).unwrap().values);
                idx += 1;
            }
        }
    }

    #[test]
    fn future_rate_augmentation_sharpens_forecasts() {
        // With the true future rates appended to the state the max-rate head
        // has the answer in its input; without them the early-window states
        // carry almost no signal.
        let mut rng = Rng::seed_from(21);
        let episodes: Vec<Episode> = (0..60).map(|i| random_episode(&mut rng, i, 8)).collect();
        let plain_cfg = LearnerConfig {
            window_n: 3,
            ..small_cfg(22)
        };
        let aug_cfg = LearnerConfig {
            augment_m: 7,
            ..plain_cfg
        };
        let plain = train_topk(&episodes, 1, &plain_cfg).unwrap();
        let augmented = train_topk(&episodes, 1, &aug_cfg).unwrap();
        let mut err_plain = 0.0;
        let mut err_aug = 0.0;
        let mut count = 0;
        for ep in &episodes {
            for t in 0..4 {
                let target = topk_targets(ep, t, 1).unwrap().values[0];
                err_plain += (plain.heads(ep, t)[0] - target).abs();
                err_aug += (augmented.heads(ep, t)[0] - target).abs();
                count += 1;
            }
        }
        assert!(
            err_aug < err_plain,
            "augmented {:.4} vs plain {:.4}",
            err_aug / count as f64,
            err_plain / count as f64
        );
    }

    #[test]
    fn checkpoint_round_trips() {
        let mut rng = Rng::seed_from(15);
        let episodes: Vec<Episode> = (0..8).map(|i| random_episode(&mut rng, i, 6)).collect();
        let cfg = LearnerConfig {
            epochs: 3,
            ..small_cfg(8)
        };
        let model = train_topk(&episodes, 4, &cfg).unwrap();
        let dir = std::env::temp_dir().join("fxliq-topk-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("topk.ckpt");
        model.save(&path).unwrap();
        let loaded = TopKModel::load(&path, &cfg).unwrap();
        assert_eq!(loaded.k(), 4);
        assert_eq!(
            topk_decision(&model, &episodes[0], 2).d.to_bits(),
            topk_decision(&loaded, &episodes[0], 2).d.to_bits()
        );
    }
}
