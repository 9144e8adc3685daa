//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criterion 9 (ordinal reproduction of the published cross-method ranking)
//! needs real daily FX data; point FXLIQ_DATA_DIR at a directory containing
//! `<PAIR>.csv` files for the seven pairs to enable it, otherwise it reports
//! SKIP.

use chrono::{Days, NaiveDate};

use fxliq::backtest::{
    acr, run_episode, BacktestConfig, EpisodeResult, MethodPairResults, OracleNPolicy,
    OraclePolicy, Policy,
};
use fxliq::baselines::{ema, standard_indicators, NaiveStrategy};
use fxliq::data::{
    build_episodes, load_rate_series, split_chronological, Episode, SplitBoundaries,
};
use fxliq::nn::{
    focal_loss, gradient_check, weighted_topk_loss, LossSpec, MlpModel, TrainSample,
};
use fxliq::rl_il;
use fxliq::rng::Rng;
use fxliq::stopping::{
    snell_values, train_brr, train_q_stopping, train_value, DecisionEstimator, DecisionSignal,
    HorizonMode, LearnerConfig,
};
use fxliq::threshold::{
    calibrate_threshold, candidate_grid, evaluate_with_at, CalibrationConfig, CalibrationTarget,
    SignalPolicy, ThresholdRule,
};
use fxliq::topk::{topk_targets, train_max_regression, train_topk};

fn date0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2011, 1, 3).unwrap()
}

fn episode(id: usize, rates: &[f64]) -> Episode {
    Episode::from_raw(id, date0() + Days::new(id as u64), rates.to_vec()).unwrap()
}

fn random_walk_episode(rng: &mut Rng, id: usize, horizon: usize) -> Episode {
    let mut x: f64 = 1.0;
    let rates: Vec<f64> = (0..horizon)
        .map(|_| {
            let v = x;
            x *= rng.range_f64(0.96, 1.0417);
            v
        })
        .collect();
    episode(id, &rates)
}

fn tiny_cfg(seed: u64) -> LearnerConfig {
    LearnerConfig {
        window_n: 4,
        hidden: [16, 8],
        epochs: 0,
        batch_size: 32,
        seed,
        ..Default::default()
    }
}

/// Every implemented policy family, using untrained (randomly initialized)
/// networks where a learner is involved: the accounting invariants must hold
/// for any decision stream.
struct PolicyZoo {
    direct: Vec<Box<dyn Policy>>,
    estimators: Vec<Box<dyn DecisionEstimator>>,
}

fn full_policy_zoo(sample_episodes: &[Episode]) -> PolicyZoo {
    let mut direct: Vec<Box<dyn Policy>> = vec![
        Box::new(NaiveStrategy::SellAtEnd),
        Box::new(NaiveStrategy::SellImmediately),
        Box::new(NaiveStrategy::SellGreedily),
        Box::new(OraclePolicy),
    ];
    for n in [1usize, 5, 10, 20] {
        direct.push(Box::new(OracleNPolicy { n }));
    }
    for spec in standard_indicators() {
        direct.push(Box::new(spec));
    }

    let cfg = tiny_cfg(11);
    let dqn_cfg = rl_il::DqnConfig {
        base: cfg,
        ..Default::default()
    };
    let estimators: Vec<Box<dyn DecisionEstimator>> = vec![
        Box::new(train_brr(sample_episodes, &cfg).unwrap()),
        Box::new(train_value(sample_episodes, HorizonMode::Finite, &cfg).unwrap()),
        Box::new(train_value(sample_episodes, HorizonMode::Infinite, &cfg).unwrap()),
        Box::new(train_q_stopping(sample_episodes, &cfg).unwrap()),
        Box::new(train_dqn_untrained(sample_episodes, &dqn_cfg)),
        Box::new(train_il_untrained(sample_episodes, &cfg)),
        Box::new(train_topk(sample_episodes, 3, &cfg).unwrap()),
    ];
    PolicyZoo { direct, estimators }
}

fn train_dqn_untrained(episodes: &[Episode], cfg: &rl_il::DqnConfig) -> rl_il::QModel {
    rl_il::train_dqn(episodes, rl_il::RewardKind::Vanilla, cfg).unwrap()
}

fn train_il_untrained(episodes: &[Episode], cfg: &LearnerConfig) -> rl_il::ImitationModel {
    rl_il::train_imitation(episodes, rl_il::ImitationVariant::Vanilla, cfg).unwrap()
}

#[test]
fn acceptance_1_accounting_exactness() {
    let start = std::time::Instant::now();
    let mut rng = Rng::seed_from(1001);
    let horizon = 12;
    let episodes: Vec<Episode> = (0..1000)
        .map(|i| random_walk_episode(&mut rng, i, horizon))
        .collect();
    let zoo = full_policy_zoo(&episodes[..16]);
    let zero = ThresholdRule::zero(fxliq::ThresholdMode::Signal);
    let bt = BacktestConfig::default();
    for ep in &episodes {
        for policy in &zoo.direct {
            check_accounting(&run_episode(policy.as_ref(), ep, bt), horizon as f64, horizon);
        }
        for est in &zoo.estimators {
            let policy = SignalPolicy {
                estimator: est.as_ref(),
                rule: zero,
            };
            check_accounting(&run_episode(&policy, ep, bt), horizon as f64, horizon);
        }
    }
    // The lump-revenue variant conserves as well; with a single unit the
    // final forced sale can be a no-op, so only the bound on sale times holds.
    let lump = BacktestConfig {
        revenue: fxliq::RevenueModel::UnitAtStart,
        ..Default::default()
    };
    for ep in episodes.iter().take(100) {
        for policy in &zoo.direct {
            let r = run_episode(policy.as_ref(), ep, lump);
            assert_eq!(r.total_sold, r.total_revenue, "{}", r.method);
            assert_eq!(r.total_revenue, 1.0);
            assert!(*r.sell_times.last().unwrap() < horizon);
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 10,
        "accounting suite took {elapsed:?}, budget is 10 s"
    );
    println!("acceptance 1 (accounting exactness): PASS [{elapsed:?}]");
}

fn check_accounting(result: &EpisodeResult, expected_revenue: f64, horizon: usize) {
    assert_eq!(
        result.total_sold, result.total_revenue,
        "{}: conservation violated",
        result.method
    );
    assert_eq!(result.total_revenue, expected_revenue, "{}", result.method);
    assert_eq!(
        *result.sell_times.last().unwrap(),
        horizon - 1,
        "{}: no forced terminal liquidation",
        result.method
    );
    assert!(result.sell_times.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn acceptance_2_oracle_dominance() {
    let mut rng = Rng::seed_from(2002);
    let horizon = 12;
    let episodes: Vec<Episode> = (0..1000)
        .map(|i| random_walk_episode(&mut rng, i, horizon))
        .collect();
    let zoo = full_policy_zoo(&episodes[..16]);
    let bt = BacktestConfig::default();

    let oracle_results: Vec<EpisodeResult> = episodes
        .iter()
        .map(|ep| run_episode(&OraclePolicy, ep, bt))
        .collect();
    let oracle_acr = acr(&oracle_results).unwrap();

    for policy in &zoo.direct {
        let results: Vec<EpisodeResult> = episodes
            .iter()
            .map(|ep| run_episode(policy.as_ref(), ep, bt))
            .collect();
        for (r, o) in results.iter().zip(oracle_results.iter()) {
            assert!(
                r.cumulative_reward <= o.cumulative_reward,
                "{} beat the oracle on episode {}",
                policy.name(),
                r.episode_id
            );
        }
        assert!(acr(&results).unwrap() <= oracle_acr, "{}", policy.name());
    }
    let zero = ThresholdRule::zero(fxliq::ThresholdMode::Signal);
    for est in &zoo.estimators {
        let policy = SignalPolicy {
            estimator: est.as_ref(),
            rule: zero,
        };
        let results: Vec<EpisodeResult> = episodes
            .iter()
            .map(|ep| run_episode(&policy, ep, bt))
            .collect();
        for (r, o) in results.iter().zip(oracle_results.iter()) {
            assert!(r.cumulative_reward <= o.cumulative_reward, "{}", est.name());
        }
        assert!(acr(&results).unwrap() <= oracle_acr, "{}", est.name());
    }

    for n in [1usize, 5, 10, 20] {
        let results: Vec<EpisodeResult> = episodes
            .iter()
            .map(|ep| run_episode(&OracleNPolicy { n }, ep, bt))
            .collect();
        assert!(
            acr(&results).unwrap() <= oracle_acr,
            "oracle-{n} beat the oracle"
        );
    }
    println!("acceptance 2 (oracle dominance): PASS");
}

#[test]
fn acceptance_3_snell_suffix_max() {
    let start = std::time::Instant::now();
    // Exact recursion vs an independent right-to-left running max, bit-exact.
    let mut rng = Rng::seed_from(3003);
    for _ in 0..1000 {
        let len = 2 + rng.below(60);
        let rates: Vec<f64> = (0..len).map(|_| rng.range_f64(0.3, 3.0)).collect();
        let recursion = snell_values(&rates);
        let mut running = f64::NEG_INFINITY;
        for t in (0..len).rev() {
            running = running.max(rates[t]);
            assert_eq!(
                recursion[t].to_bits(),
                running.to_bits(),
                "recursion and scan disagree at t={t}"
            );
        }
    }

    // Learned values on a deterministic repeated episode track the suffix max.
    let rates = [1.0, 1.07, 0.96, 1.1, 1.03, 0.92, 1.05, 0.99];
    let episodes: Vec<Episode> = (0..16).map(|i| episode(i, &rates)).collect();
    let snell = snell_values(&episodes[0].norm_rates);
    let cfg = LearnerConfig {
        window_n: 4,
        hidden: [64, 32],
        learning_rate: 0.01,
        epochs: 600,
        batch_size: 32,
        seed: 33,
        ..Default::default()
    };

    let brr = train_brr(&episodes, &cfg).unwrap();
    for t in 0..rates.len() - 1 {
        let estimate = brr.decision(&episodes[0], t).d + episodes[0].norm(t);
        assert!(
            (estimate - snell[t + 1]).abs() < 2e-2,
            "brr t={t}: {estimate} vs {}",
            snell[t + 1]
        );
    }

    // Bootstrapped learners propagate value through target-network syncs, so
    // they get a faster cadence and a longer budget.
    let cfg = LearnerConfig {
        sync_every: 50,
        epochs: 3000,
        ..cfg
    };
    let dp = train_value(&episodes, HorizonMode::Finite, &cfg).unwrap();
    for t in 0..rates.len() - 1 {
        let estimate = dp.hold_value(&episodes[0], t);
        assert!(
            (estimate - snell[t + 1]).abs() < 2e-2,
            "dp-finite t={t}: {estimate} vs {}",
            snell[t + 1]
        );
    }

    let q = train_q_stopping(&episodes, &cfg).unwrap();
    for t in 0..rates.len() - 1 {
        let estimate = q.hold_value(&episodes[0], t);
        assert!(
            (estimate - snell[t + 1]).abs() < 2e-2,
            "q-stopping t={t}: {estimate} vs {}",
            snell[t + 1]
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}, budget 5 min");
    println!("acceptance 3 (snell suffix-max oracle): PASS [{elapsed:?}]");
}

#[test]
fn acceptance_4_gradient_checks() {
    let start = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = Rng::seed_from(4000 + seed);
        let mut random_input = |dim: usize| -> Vec<f64> {
            (0..dim).map(|_| rng.range_f64(-1.0, 1.0)).collect()
        };

        let model = MlpModel::new(&[3, 4, 3, 1], seed);
        let sample = TrainSample {
            input: random_input(3),
            target: random_input(1),
            loss: LossSpec::Mse,
        };
        worst = worst.max(gradient_check(&model, &sample).unwrap());

        for k in [1usize, 3, 5] {
            let model = MlpModel::new(&[3, 4, 3, k], 100 + seed);
            let mut target = random_input(k);
            target.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let sample = TrainSample {
                input: random_input(3),
                target,
                loss: LossSpec::WeightedTopK,
            };
            worst = worst.max(gradient_check(&model, &sample).unwrap());
        }

        let model = MlpModel::new(&[3, 4, 3, 1], 200 + seed);
        let label = vec![(seed % 2) as f64];
        let sample = TrainSample {
            input: random_input(3),
            target: label.clone(),
            loss: LossSpec::CrossEntropy,
        };
        worst = worst.max(gradient_check(&model, &sample).unwrap());

        for gamma in [0.0, 2.0] {
            let sample = TrainSample {
                input: random_input(3),
                target: label.clone(),
                loss: LossSpec::Focal { gamma },
            };
            worst = worst.max(gradient_check(&model, &sample).unwrap());
        }
    }
    assert!(worst < 1e-4, "max relative gradient error {worst}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}, budget 30 s");
    println!("acceptance 4 (gradient checks): PASS [max err {worst:.2e}, {elapsed:?}]");
}

#[test]
fn acceptance_5_topk_target_oracle() {
    let mut rng = Rng::seed_from(5005);
    for i in 0..1000 {
        let horizon = 5 + rng.below(15);
        let ep = random_walk_episode(&mut rng, i, horizon);
        for t in 0..horizon - 1 {
            let k = 1 + rng.below(5);
            let got = topk_targets(&ep, t, k).unwrap();
            let mut sorted: Vec<f64> = ep.norm_rates[t + 1..].to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            sorted.truncate(k.min(sorted.len()));
            assert_eq!(got.values, sorted, "episode {i}, t={t}, k={k}");
        }
    }

    // Rank-weighted loss against an independently summed oracle.
    for trial in 0..200 {
        let mut rng = Rng::seed_from(50_000 + trial);
        let k = 1 + rng.below(6);
        let j = 1 + rng.below(k);
        let pred: Vec<f64> = (0..k).map(|_| rng.range_f64(0.5, 1.5)).collect();
        let mut targets: Vec<f64> = (0..j).map(|_| rng.range_f64(0.5, 1.5)).collect();
        targets.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let got = weighted_topk_loss(&pred, &targets);
        // Oracle: explicit reverse-order summation of (1/rank) squared gaps.
        let mut oracle = 0.0;
        for rank in (1..=j).rev() {
            let diff = pred[rank - 1] - targets[rank - 1];
            oracle += diff * diff / rank as f64;
        }
        let denom = oracle.abs().max(1e-30);
        assert!(
            ((got - oracle) / denom).abs() < 1e-12,
            "loss {got} vs oracle {oracle}"
        );
    }
    println!("acceptance 5 (top-K target oracle): PASS");
}

#[test]
fn acceptance_6_reduction_identities() {
    // K=1 multi-task training bit-matches the dedicated max-regression path.
    let mut rng = Rng::seed_from(6006);
    let episodes: Vec<Episode> = (0..12)
        .map(|i| random_walk_episode(&mut rng, i, 8))
        .collect();
    let cfg = LearnerConfig {
        window_n: 4,
        hidden: [32, 16],
        epochs: 20,
        batch_size: 32,
        seed: 66,
        ..Default::default()
    };
    let topk1 = train_topk(&episodes, 1, &cfg).unwrap();
    let maxreg = train_max_regression(&episodes, &cfg).unwrap();
    let (a, b) = (topk1.params_flat(), maxreg.params_flat());
    assert!(
        a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
        "K=1 and max-regression parameter trajectories differ"
    );

    // focal(gamma = 0) is cross-entropy.
    for i in 1..200 {
        let p = i as f64 / 200.0;
        assert!((focal_loss(p, 0.0) - (-p.ln())).abs() < 1e-9);
    }

    // EMA with period 1 is the identity.
    let series: Vec<f64> = (0..50).map(|i| 1.0 + 0.01 * (i as f64).sin()).collect();
    assert_eq!(ema(&series, 1), series);

    // Constant episodes pay zero under every policy. The learners come from
    // random-walk data (constant rates make every oracle label a sell, which
    // the imitation trainer rightly rejects as degenerate).
    let constant = episode(0, &[1.25; 10]);
    let mut zoo_rng = Rng::seed_from(6600);
    let zoo_episodes: Vec<Episode> = (0..16)
        .map(|i| random_walk_episode(&mut zoo_rng, i, 10))
        .collect();
    let zoo = full_policy_zoo(&zoo_episodes);
    let bt = BacktestConfig::default();
    for policy in &zoo.direct {
        let r = run_episode(policy.as_ref(), &constant, bt);
        assert_eq!(r.cumulative_reward, 0.0, "{}", policy.name());
    }
    let zero = ThresholdRule::zero(fxliq::ThresholdMode::Signal);
    for est in &zoo.estimators {
        let policy = SignalPolicy {
            estimator: est.as_ref(),
            rule: zero,
        };
        assert_eq!(run_episode(&policy, &constant, bt).cumulative_reward, 0.0);
    }
    println!("acceptance 6 (reduction identities): PASS");
}

/// Reproducible pseudo-random signal keyed on (episode id, t).
struct KeyedEstimator;

impl DecisionEstimator for KeyedEstimator {
    fn decision(&self, ep: &Episode, t: usize) -> DecisionSignal {
        let mut rng = Rng::seed_from(((ep.id as u64) << 32) | t as u64);
        DecisionSignal {
            d: rng.range_f64(-0.06, 0.06),
            source: "keyed",
        }
    }

    fn name(&self) -> String {
        "keyed".into()
    }
}

#[test]
fn acceptance_7_at_optimality_and_causality() {
    let mut rng = Rng::seed_from(7007);
    let mut pool: Vec<Episode> = (0..60)
        .map(|i| random_walk_episode(&mut rng, i, 10))
        .collect();
    let est = KeyedEstimator;
    let bt = BacktestConfig::default();
    let cfg = CalibrationConfig {
        window_len: 12,
        candidate_count: 15,
        ..Default::default()
    };

    // Optimality: the calibrated threshold's window payoff equals the
    // exhaustive maximum over the candidate grid, for both modes.
    for target in [CalibrationTarget::Signal(&est), CalibrationTarget::Rate] {
        let history = &pool[20..32];
        let rule = calibrate_threshold(&target, history, &cfg, bt).unwrap();
        let grid = candidate_grid(&target, history, &cfg).unwrap();
        let payoff_of = |delta: f64| {
            let rule = ThresholdRule {
                mode: target.mode(),
                delta,
            };
            let policy = target.policy(rule);
            let results: Vec<EpisodeResult> = history
                .iter()
                .map(|ep| run_episode(&policy, ep, bt))
                .collect();
            acr(&results).unwrap()
        };
        let best = grid.iter().map(|&d| payoff_of(d)).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(
            payoff_of(rule.delta),
            best,
            "calibrated payoff is not the exhaustive max"
        );
    }

    // Causality: mutating episodes at or after the target changes nothing.
    let eval = pool[40].clone();
    let target = CalibrationTarget::Signal(&est);
    let before = evaluate_with_at(&target, std::slice::from_ref(&eval), &pool, &cfg, bt).unwrap();
    for ep in pool.iter_mut().skip(40) {
        let scaled: Vec<f64> = ep.raw_rates.iter().map(|r| r * 2.0).collect();
        *ep = Episode::from_raw(ep.id, ep.start_date, scaled).unwrap();
    }
    let after = evaluate_with_at(&target, &[eval], &pool, &cfg, bt).unwrap();
    assert_eq!(before[0].rule, after[0].rule);
    assert_eq!(
        before[0].result.cumulative_reward.to_bits(),
        after[0].result.cumulative_reward.to_bits()
    );
    println!("acceptance 7 (AT optimality & causality): PASS");
}

#[test]
fn acceptance_8_overestimation_bias_probe() {
    let start = std::time::Instant::now();
    const SEEDS: usize = 20;
    const HORIZON: usize = 12;
    const NOISE: f64 = 0.08;
    const K: usize = 3;
    let mid = HORIZON / 2; // 6 future steps remain

    // Monte-Carlo oracle for E[Z_{t+1}] at mid-episode: mean of the top-K of
    // the remaining i.i.d. draws.
    let remaining = HORIZON - 1 - mid;
    let mut mc = Rng::seed_from(88_888);
    let mut z_sum = 0.0;
    const TRIALS: usize = 200_000;
    for _ in 0..TRIALS {
        let mut draws: Vec<f64> = (0..remaining)
            .map(|_| 1.0 + mc.range_f64(-NOISE, NOISE))
            .collect();
        draws.sort_by(|a, b| b.partial_cmp(a).unwrap());
        z_sum += draws[..K].iter().sum::<f64>() / K as f64;
    }
    let z_oracle = z_sum / TRIALS as f64;

    let mut value_biases = Vec::with_capacity(SEEDS);
    let mut topk_errors = Vec::with_capacity(SEEDS);
    for seed in 0..SEEDS as u64 {
        let mut rng = Rng::seed_from(8000 + seed);
        let episodes: Vec<Episode> = (0..200)
            .map(|i| {
                let rates: Vec<f64> = std::iter::once(1.0)
                    .chain((1..HORIZON).map(|_| 1.0 + rng.range_f64(-NOISE, NOISE)))
                    .collect();
                episode(i, &rates)
            })
            .collect();
        let cfg = LearnerConfig {
            window_n: 5,
            hidden: [64, 32],
            epochs: 15,
            batch_size: 128,
            seed,
            ..Default::default()
        };

        let value = train_value(&episodes, HorizonMode::Infinite, &cfg).unwrap();
        let mean_hold: f64 = episodes
            .iter()
            .take(100)
            .map(|ep| value.hold_value(ep, mid))
            .sum::<f64>()
            / 100.0;
        value_biases.push(mean_hold - 1.0);

        let topk = train_topk(&episodes, K, &cfg).unwrap();
        let mean_w: f64 = episodes
            .iter()
            .take(100)
            .map(|ep| topk.w_estimate(ep, mid))
            .sum::<f64>()
            / 100.0;
        topk_errors.push(mean_w - z_oracle);
    }

    // One-sided t-test that the bootstrapped hold value exceeds 1.0:
    // t > 2.539 rejects at p < 0.01 with 19 degrees of freedom.
    let n = SEEDS as f64;
    let mean = value_biases.iter().sum::<f64>() / n;
    let var = value_biases.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (n - 1.0);
    let t_stat = mean / (var.sqrt() / n.sqrt());
    assert!(
        t_stat > 2.539,
        "hold-value bias not significant: mean {mean:.4}, t = {t_stat:.2}"
    );

    let worst_topk = topk_errors.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    assert!(
        worst_topk < 2e-2,
        "top-K estimate strayed from the Monte-Carlo oracle by {worst_topk:.4}"
    );
    let elapsed = start.elapsed();
    println!(
        "acceptance 8 (overestimation-bias probe): PASS [bias {mean:+.4}, t {t_stat:.1}, top-K err {worst_topk:.4}, {elapsed:?}]"
    );
}

const PAPER_PAIRS: [&str; 7] = [
    "EURGBP", "EURUSD", "GBPUSD", "YENINR", "GBPINR", "USDINR", "EURINR",
];

#[test]
fn acceptance_9_paper_reproduction() {
    let Some(dir) = std::env::var_os("FXLIQ_DATA_DIR") else {
        println!("acceptance 9 (paper reproduction): SKIP [set FXLIQ_DATA_DIR to run]");
        return;
    };
    let dir = std::path::PathBuf::from(dir);
    let boundaries = SplitBoundaries {
        validation_start: NaiveDate::from_ymd_opt(2017, 1, 10).unwrap(),
        test_start: NaiveDate::from_ymd_opt(2019, 4, 25).unwrap(),
    };
    let bt = BacktestConfig::default();
    let at_cfg = CalibrationConfig::default();
    let mut cells: Vec<MethodPairResults> = Vec::new();
    let mut sell_at_wins_vs_naive = [0usize; 3];
    let mut topk_wins_vs_sell_at = 0usize;

    for pair in PAPER_PAIRS {
        let path = dir.join(format!("{pair}.csv"));
        let loaded = load_rate_series(&path, pair).expect("pair data");
        let episodes = build_episodes(&loaded.series, 58, 5).expect("episodes");
        let splits = split_chronological(episodes, boundaries).expect("splits");
        // Split sizes must sit in the published order of magnitude and the
        // training labels must be hold-heavy (the skew the IL variants
        // exist to handle).
        assert!(
            splits.train.len() > 2 * splits.test.len(),
            "{pair}: train {} vs test {}",
            splits.train.len(),
            splits.test.len()
        );
        assert!((50..5000).contains(&splits.train.len()), "{pair}");
        let mut sells = 0usize;
        let mut total = 0usize;
        for ep in &splits.train {
            for action in rl_il::oracle_actions(ep) {
                sells += (action == fxliq::Action::Sell) as usize;
                total += 1;
            }
        }
        assert!(
            (sells as f64) < 0.5 * total as f64,
            "{pair}: sell labels are not a minority"
        );
        let pool: Vec<Episode> = splits
            .train
            .iter()
            .chain(splits.validation.iter())
            .chain(splits.test.iter())
            .cloned()
            .collect();

        let mut add = |method: &str, results: Vec<EpisodeResult>| {
            cells.push(MethodPairResults {
                method: method.into(),
                pair: pair.into(),
                results,
            });
        };

        let naive = [
            NaiveStrategy::SellAtEnd,
            NaiveStrategy::SellImmediately,
            NaiveStrategy::SellGreedily,
        ];
        let mut naive_acr = [0.0f64; 3];
        for (i, strat) in naive.iter().enumerate() {
            let results: Vec<EpisodeResult> = splits
                .test
                .iter()
                .map(|ep| run_episode(strat, ep, bt))
                .collect();
            naive_acr[i] = acr(&results).unwrap();
            add(&strat.to_string(), results);
        }
        for spec in standard_indicators() {
            let results: Vec<EpisodeResult> = splits
                .test
                .iter()
                .map(|ep| run_episode(&spec, ep, bt))
                .collect();
            add(&spec.to_string(), results);
        }

        let sell_at_outcomes =
            evaluate_with_at(&CalibrationTarget::Rate, &splits.test, &pool, &at_cfg, bt).unwrap();
        let sell_at_results: Vec<EpisodeResult> =
            sell_at_outcomes.into_iter().map(|o| o.result).collect();
        let sell_at_acr = acr(&sell_at_results).unwrap();
        add("sell-at", sell_at_results);
        for (i, &n_acr) in naive_acr.iter().enumerate() {
            sell_at_wins_vs_naive[i] += (sell_at_acr > n_acr) as usize;
        }

        // K selected on validation ACR (adaptive threshold applied), then
        // evaluated once on test.
        let cfg = LearnerConfig::default();
        let mut best: Option<(f64, usize)> = None;
        for k in 1..=5 {
            let model = train_topk(&splits.train, k, &cfg).unwrap();
            let target = CalibrationTarget::Signal(&model);
            let val =
                evaluate_with_at(&target, &splits.validation, &pool, &at_cfg, bt).unwrap();
            let val_results: Vec<EpisodeResult> = val.into_iter().map(|o| o.result).collect();
            let val_acr = acr(&val_results).unwrap();
            if best.is_none_or(|(b, _)| val_acr > b) {
                best = Some((val_acr, k));
            }
        }
        let (_, k) = best.unwrap();
        let model = train_topk(&splits.train, k, &cfg).unwrap();
        let target = CalibrationTarget::Signal(&model);
        let test = evaluate_with_at(&target, &splits.test, &pool, &at_cfg, bt).unwrap();
        let topk_results: Vec<EpisodeResult> = test.into_iter().map(|o| o.result).collect();
        let topk_acr = acr(&topk_results).unwrap();
        add("topk", topk_results);
        topk_wins_vs_sell_at += (topk_acr >= sell_at_acr) as usize;

        let oracle_results: Vec<EpisodeResult> = splits
            .test
            .iter()
            .map(|ep| run_episode(&OraclePolicy, ep, bt))
            .collect();
        println!(
            "  {pair}: oracle {:.3}, sell-at {sell_at_acr:.3}, topk(k={k}) {topk_acr:.3}",
            acr(&oracle_results).unwrap()
        );
    }

    for (i, wins) in sell_at_wins_vs_naive.iter().enumerate() {
        assert!(
            *wins >= 5,
            "Sell-AT beat naive baseline {i} on only {wins}/7 pairs"
        );
    }
    assert!(
        topk_wins_vs_sell_at >= 5,
        "top-K + AT matched Sell-AT on only {topk_wins_vs_sell_at}/7 pairs"
    );

    let table = fxliq::compare(&cells).unwrap();
    println!("{}", table.render_text());
    assert_eq!(
        table.rows[0].method, "topk",
        "top-K + AT is not ranked first"
    );
    println!("acceptance 9 (paper reproduction): PASS");
}
