//! Command-line pipeline: ingest rates, build episodes, train agents,
//! calibrate thresholds, backtest, and rank methods across currency pairs.

pub mod config;
pub mod methods;

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fxliq::backtest::{
    acr, collapse_warning, compare, run_episode, EpisodeResult, MethodPairResults,
};
use fxliq::data::{
    build_episodes, load_rate_series, non_overlapping_count, split_chronological,
    write_episode_store, Episode, EpisodeSplits,
};
use fxliq::OraclePolicy;

use config::{Overrides, RunConfig};
use methods::{all_methods, checkpoint_path, evaluate_method, obtain_estimator, parse_method, Method};

#[derive(Parser, Debug)]
#[command(name = "fxliq", about = "FC liquidation agents: train, calibrate, backtest, rank")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and clean a rate CSV, reporting dropped rows.
    Ingest(CommonOpts),
    /// Build rolling-window episodes and write the audit store.
    Episodes(CommonOpts),
    /// Train a learned method on the train split and save its checkpoint.
    Train {
        method: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate one method on a split (with adaptive thresholds where they
    /// apply) and write per-episode results.
    Backtest {
        method: String,
        /// Load an existing checkpoint instead of retraining.
        #[arg(long)]
        reuse: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate many methods across currency pairs and rank them.
    Compare {
        /// `all` or a comma-separated list of method tokens.
        #[arg(long, default_value = "all")]
        methods: String,
        /// Comma-separated currency pairs; data comes from `<data-dir>/<PAIR>.csv`.
        #[arg(long)]
        pairs: String,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        reuse: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Pick hyperparameters on validation ACR (the test split is never read).
    GridSearch {
        method: String,
        /// Past-window lengths to try.
        #[arg(long, default_value = "5,10,20")]
        grid_n: String,
        /// Head counts to try (top-K only).
        #[arg(long, default_value = "1,2,3,4,5")]
        grid_k: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Reference ACR of the oracle and oracle-n policies.
    Oracle {
        /// Lookahead depths for oracle-n.
        #[arg(long, default_value = "1,5,10,20")]
        oracle_n: String,
        #[command(flatten)]
        common: CommonOpts,
    },
}

#[derive(Args, Debug, Default)]
struct CommonOpts {
    /// `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    pair: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    shift: Option<usize>,
    #[arg(long)]
    validation_start: Option<String>,
    #[arg(long)]
    test_start: Option<String>,
    /// Past-rate window length n.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Append this many true future rates to the state.
    #[arg(long)]
    augment: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Hidden layer sizes, e.g. 256,128.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    sync_every: Option<usize>,
    /// Environment steps between DQN gradient updates.
    #[arg(long)]
    train_freq: Option<usize>,
    #[arg(long)]
    at_window: Option<usize>,
    #[arg(long)]
    at_candidates: Option<usize>,
    /// Fix the decision threshold at 0 instead of calibrating it.
    #[arg(long)]
    no_at: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split: Option<String>,
    /// Score sales at the literal normalized rate instead of the excess.
    #[arg(long)]
    raw_acr: bool,
    /// `unit-per-step` or `unit-at-start`.
    #[arg(long)]
    revenue: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonOpts {
    fn resolve(&self, method: Option<&str>) -> Result<RunConfig> {
        let mut ov = Overrides::new();
        let mut set = |key: &'static str, value: Option<String>| {
            if let Some(v) = value {
                ov.insert(key, v);
            }
        };
        set("data", self.data.as_ref().map(|p| p.display().to_string()));
        set("pair", self.pair.clone());
        set("horizon", self.horizon.map(|v| v.to_string()));
        set("shift", self.shift.map(|v| v.to_string()));
        set("validation_start", self.validation_start.clone());
        set("test_start", self.test_start.clone());
        set("window_n", self.n.map(|v| v.to_string()));
        set("k", self.k.map(|v| v.to_string()));
        set("gamma", self.gamma.map(|v| v.to_string()));
        set("augment_m", self.augment.map(|v| v.to_string()));
        set("epochs", self.epochs.map(|v| v.to_string()));
        set("batch_size", self.batch_size.map(|v| v.to_string()));
        set("learning_rate", self.lr.map(|v| v.to_string()));
        set("hidden", self.hidden.clone());
        set("sync_every", self.sync_every.map(|v| v.to_string()));
        set("train_freq", self.train_freq.map(|v| v.to_string()));
        set("at_window", self.at_window.map(|v| v.to_string()));
        set("at_candidates", self.at_candidates.map(|v| v.to_string()));
        set("no_at", self.no_at.then(|| "true".into()));
        set("seed", self.seed.map(|v| v.to_string()));
        set("split", self.split.clone());
        set("raw_acr", self.raw_acr.then(|| "true".into()));
        set("revenue", self.revenue.clone());
        set("out", self.out.as_ref().map(|p| p.display().to_string()));
        set("method", method.map(|m| m.to_string()));
        config::resolve(self.config.as_deref(), &ov)
    }
}

/// Parse and execute. Returns an error with a one-line diagnostic on failure.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err)
            if matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{err}");
            return Ok(());
        }
        Err(err) => return Err(err.into()),
    };
    match cli.command {
        Command::Ingest(common) => cmd_ingest(&common.resolve(None)?),
        Command::Episodes(common) => cmd_episodes(&common.resolve(None)?),
        Command::Train { method, common } => cmd_train(&common.resolve(Some(&method))?),
        Command::Backtest {
            method,
            reuse,
            common,
        } => cmd_backtest(&common.resolve(Some(&method))?, reuse),
        Command::Compare {
            methods,
            pairs,
            data_dir,
            reuse,
            common,
        } => cmd_compare(&common.resolve(None)?, &methods, &pairs, &data_dir, reuse),
        Command::GridSearch {
            method,
            grid_n,
            grid_k,
            common,
        } => cmd_grid_search(&common.resolve(Some(&method))?, &grid_n, &grid_k),
        Command::Oracle { oracle_n, common } => cmd_oracle(&common.resolve(None)?, &oracle_n),
    }
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating output dir {}", cfg.out.display()))
}

/// Collapse report, except for sell-immediately, whose 100% sell rate is its
/// definition rather than a degenerate outcome.
fn check_collapse(method: &Method, results: &[EpisodeResult], horizon: usize) -> Option<String> {
    if matches!(method, Method::Naive(fxliq::NaiveStrategy::SellImmediately)) {
        return None;
    }
    collapse_warning(results, horizon)
}

struct LoadedData {
    dropped_rows: usize,
    splits: EpisodeSplits,
    pool: Vec<Episode>,
}

fn load_splits(cfg: &RunConfig) -> Result<LoadedData> {
    let loaded = load_rate_series(&cfg.data, &cfg.pair)
        .with_context(|| format!("loading {}", cfg.data.display()))?;
    let episodes = build_episodes(&loaded.series, cfg.horizon, cfg.shift)?;
    let splits = split_chronological(episodes, cfg.boundaries())?;
    let pool: Vec<Episode> = splits
        .train
        .iter()
        .chain(splits.validation.iter())
        .chain(splits.test.iter())
        .cloned()
        .collect();
    Ok(LoadedData {
        dropped_rows: loaded.dropped_rows,
        splits,
        pool,
    })
}

fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let loaded = load_rate_series(&cfg.data, &cfg.pair)
        .with_context(|| format!("loading {}", cfg.data.display()))?;
    let clean_path = cfg.out.join(format!("{}-clean.csv", cfg.pair));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&clean_path)?);
    writeln!(file, "date,rate")?;
    for (date, rate) in loaded.series.dates.iter().zip(loaded.series.rates.iter()) {
        writeln!(file, "{date},{rate}")?;
    }
    drop(file);
    let report_path = cfg.out.join(format!("{}-ingest-report.txt", cfg.pair));
    std::fs::write(
        &report_path,
        format!(
            "pair {}\nrows_kept {}\nrows_dropped {}\nfirst {}\nlast {}\n",
            cfg.pair,
            loaded.series.len(),
            loaded.dropped_rows,
            loaded.series.dates.first().unwrap(),
            loaded.series.dates.last().unwrap(),
        ),
    )?;
    cfg.write_echo(&cfg.out.join(format!("config-ingest-{}.txt", cfg.pair)))?;
    println!(
        "ingested {}: {} rows kept, {} dropped -> {}",
        cfg.pair,
        loaded.series.len(),
        loaded.dropped_rows,
        clean_path.display()
    );
    Ok(())
}

fn cmd_episodes(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let data = load_splits(cfg)?;
    let store_path = cfg.out.join(format!("{}-episodes.csv", cfg.pair));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&store_path)?);
    let all: Vec<Episode> = data
        .splits
        .train
        .iter()
        .chain(data.splits.validation.iter())
        .chain(data.splits.test.iter())
        .cloned()
        .collect();
    write_episode_store(&all, &mut file)?;
    drop(file);

    let counts_path = cfg.out.join(format!("{}-episode-counts.csv", cfg.pair));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&counts_path)?);
    writeln!(file, "split,total,non_overlapping")?;
    for (name, eps) in [
        ("train", &data.splits.train),
        ("validation", &data.splits.validation),
        ("test", &data.splits.test),
    ] {
        writeln!(
            file,
            "{},{},{}",
            name,
            eps.len(),
            non_overlapping_count(eps, cfg.horizon, cfg.shift)
        )?;
        println!(
            "{} {}: {} episodes ({} non-overlapping)",
            cfg.pair,
            name,
            eps.len(),
            non_overlapping_count(eps, cfg.horizon, cfg.shift)
        );
    }
    drop(file);
    cfg.write_echo(&cfg.out.join(format!("config-episodes-{}.txt", cfg.pair)))?;
    println!("dropped rows during load: {}", data.dropped_rows);
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let method = parse_method(&cfg.method)?;
    let Method::Learned(kind) = &method else {
        bail!("{} is not a trainable method", cfg.method);
    };
    let data = load_splits(cfg)?;
    let ckpt = checkpoint_path(&cfg.out, &method, &cfg.pair);
    obtain_estimator(kind, cfg, &data.splits.train, &ckpt, false)?;
    cfg.write_echo(&cfg.out.join(format!(
        "config-train-{}-{}.txt",
        method.token(),
        cfg.pair
    )))?;
    println!("trained {} on {} -> {}", method.token(), cfg.pair, ckpt.display());
    Ok(())
}

fn write_results(
    cfg: &RunConfig,
    method: &Method,
    results: &[EpisodeResult],
) -> Result<PathBuf> {
    let path = cfg.out.join(format!(
        "results-{}-{}-{}.csv",
        sanitize(&method.token()),
        cfg.pair,
        cfg.split
    ));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    fxliq::backtest::write_results_csv(results, &cfg.pair, &cfg.split, &mut file)?;
    Ok(path)
}

fn sanitize(token: &str) -> String {
    token.replace([':', ','], "_")
}

fn cmd_backtest(cfg: &RunConfig, reuse: bool) -> Result<()> {
    ensure_out(cfg)?;
    let method = parse_method(&cfg.method)?;
    let data = load_splits(cfg)?;
    let results = evaluate_method(&method, cfg, &data.splits, &data.pool, reuse)?;
    let path = write_results(cfg, &method, &results)?;
    let acr_value = acr(&results)?;
    println!(
        "{} {} {}: ACR {:.6} over {} episodes -> {}",
        method.token(),
        cfg.pair,
        cfg.split,
        acr_value,
        results.len(),
        path.display()
    );
    if let Some(warning) = check_collapse(&method, &results, cfg.horizon) {
        println!("warning: {warning}");
    }
    cfg.write_echo(&cfg.out.join(format!(
        "config-backtest-{}-{}.txt",
        sanitize(&method.token()),
        cfg.pair
    )))?;
    Ok(())
}

fn cmd_compare(
    base: &RunConfig,
    methods_arg: &str,
    pairs_arg: &str,
    data_dir: &Path,
    reuse: bool,
) -> Result<()> {
    ensure_out(base)?;
    let methods: Vec<Method> = if methods_arg == "all" {
        all_methods()
    } else {
        methods_arg
            .split(',')
            .map(|t| parse_method(t.trim()))
            .collect::<Result<_>>()?
    };
    let pairs: Vec<String> = pairs_arg
        .split(',')
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect();
    if pairs.is_empty() {
        bail!("no currency pairs given");
    }

    let results_dir = base.out.join("results");
    std::fs::create_dir_all(&results_dir)?;

    struct PairOutput {
        pair: String,
        oracle_acr: f64,
        cells: Vec<MethodPairResults>,
        warnings: Vec<String>,
    }

    // One job per currency pair; each job owns its models exclusively.
    // Outputs merge in the pairs' given order so runs stay reproducible.
    let pair_outputs: Vec<PairOutput> = std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .iter()
            .map(|pair| {
                let methods = &methods;
                scope.spawn(move || -> anyhow::Result<PairOutput> {
                    let mut cfg = (*base).clone();
                    cfg.pair = pair.clone();
                    cfg.data = data_dir.join(format!("{pair}.csv"));
                    let data = load_splits(&cfg)?;
                    let eval = methods::split_episodes(&data.splits, &cfg.split)?;
                    let oracle_results: Vec<EpisodeResult> = eval
                        .iter()
                        .map(|ep| run_episode(&OraclePolicy, ep, cfg.backtest()))
                        .collect();
                    let mut out = PairOutput {
                        pair: pair.clone(),
                        oracle_acr: acr(&oracle_results)?,
                        cells: Vec::new(),
                        warnings: Vec::new(),
                    };
                    for method in methods {
                        let mut mcfg = cfg.clone();
                        mcfg.method = method.token();
                        let results =
                            evaluate_method(method, &mcfg, &data.splits, &data.pool, reuse)?;
                        if let Some(warning) = check_collapse(method, &results, cfg.horizon) {
                            out.warnings.push(format!("{pair}: {warning}"));
                        }
                        out.cells.push(MethodPairResults {
                            method: method.token(),
                            pair: pair.clone(),
                            results,
                        });
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("pair job panicked"))
            .collect::<anyhow::Result<Vec<PairOutput>>>()
    })?;

    let mut cells: Vec<MethodPairResults> = Vec::new();
    let mut oracle_acr: Vec<(String, f64)> = Vec::new();
    for output in pair_outputs {
        for warning in &output.warnings {
            println!("warning: {warning}");
        }
        oracle_acr.push((output.pair.clone(), output.oracle_acr));
        for cell in output.cells {
            let path = results_dir.join(format!(
                "{}-{}-{}.csv",
                sanitize(&cell.method),
                cell.pair,
                base.split
            ));
            let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
            fxliq::backtest::write_results_csv(&cell.results, &cell.pair, &base.split, &mut file)?;
            cells.push(cell);
        }
    }

    let table = compare(&cells)?;
    let mut text = table.render_text();
    text.push_str("\noracle reference:\n");
    for (pair, value) in &oracle_acr {
        text.push_str(&format!("  {pair}: {value:.3}\n"));
    }
    std::fs::write(base.out.join("table.txt"), &text)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(base.out.join("acr_summary.csv"))?);
    table.write_acr_csv(&mut file)?;
    drop(file);
    let mut file = std::io::BufWriter::new(std::fs::File::create(base.out.join("ranking.csv"))?);
    table.write_rank_csv(&mut file)?;
    drop(file);
    base.write_echo(&base.out.join("config-compare.txt"))?;
    print!("{text}");
    Ok(())
}

fn parse_grid(arg: &str, what: &str) -> Result<Vec<usize>> {
    let grid: Vec<usize> = arg
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad {what} grid {arg:?}"))?;
    if grid.is_empty() {
        bail!("empty {what} grid");
    }
    Ok(grid)
}

/// Hyperparameter selection on validation ACR. The calibration pool contains
/// only train and validation episodes, so test data cannot influence the
/// choice.
fn cmd_grid_search(cfg: &RunConfig, grid_n: &str, grid_k: &str) -> Result<()> {
    ensure_out(cfg)?;
    let method = parse_method(&cfg.method)?;
    let Method::Learned(kind) = &method else {
        bail!("{} has no hyperparameters to search", cfg.method);
    };
    let data = load_splits(cfg)?;
    let val_pool: Vec<Episode> = data
        .splits
        .train
        .iter()
        .chain(data.splits.validation.iter())
        .cloned()
        .collect();
    let n_grid = parse_grid(grid_n, "n")?;
    let k_grid = if matches!(kind, methods::LearnedMethod::TopK) {
        parse_grid(grid_k, "k")?
    } else {
        vec![cfg.k]
    };

    let grid_path = cfg.out.join(format!(
        "grid-{}-{}.csv",
        sanitize(&method.token()),
        cfg.pair
    ));
    let mut grid_file = std::io::BufWriter::new(std::fs::File::create(&grid_path)?);
    writeln!(grid_file, "n,k,validation_acr")?;

    let mut best: Option<(f64, usize, usize)> = None;
    for &n in &n_grid {
        for &k in &k_grid {
            let mut trial = cfg.clone();
            trial.window_n = n;
            trial.k = k;
            trial.split = "validation".into();
            let ckpt = cfg.out.join("grid-checkpoints").join(format!(
                "{}-{}-n{}-k{}.ckpt",
                sanitize(&method.token()),
                cfg.pair,
                n,
                k
            ));
            let estimator = obtain_estimator(kind, &trial, &data.splits.train, &ckpt, false)?;
            let outcomes = fxliq::threshold::evaluate_with_at(
                &fxliq::threshold::CalibrationTarget::Signal(estimator.as_ref()),
                &data.splits.validation,
                &val_pool,
                &trial.calibration(),
                trial.backtest(),
            )?;
            let results: Vec<EpisodeResult> = outcomes.into_iter().map(|o| o.result).collect();
            let val_acr = acr(&results)?;
            writeln!(grid_file, "{n},{k},{val_acr}")?;
            println!("{} {} n={n} k={k}: validation ACR {val_acr:.6}", method.token(), cfg.pair);
            if best.is_none_or(|(b, _, _)| val_acr > b) {
                best = Some((val_acr, n, k));
            }
        }
    }
    drop(grid_file);

    let (best_acr, n, k) = best.expect("non-empty grid");
    let mut chosen = cfg.clone();
    chosen.window_n = n;
    chosen.k = k;
    // Refresh the main checkpoint with the winning configuration.
    let ckpt = checkpoint_path(&cfg.out, &method, &cfg.pair);
    obtain_estimator(kind, &chosen, &data.splits.train, &ckpt, false)?;
    chosen.write_echo(&cfg.out.join(format!(
        "best-{}-{}.conf",
        sanitize(&method.token()),
        cfg.pair
    )))?;
    println!(
        "best {} {}: n={n} k={k} (validation ACR {best_acr:.6})",
        method.token(),
        cfg.pair
    );
    Ok(())
}

fn cmd_oracle(cfg: &RunConfig, oracle_n: &str) -> Result<()> {
    ensure_out(cfg)?;
    let data = load_splits(cfg)?;
    let eval = methods::split_episodes(&data.splits, &cfg.split)?;
    let bt = cfg.backtest();
    let path = cfg.out.join(format!("oracle-{}.csv", cfg.pair));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(file, "method,pair,split,acr")?;

    let results: Vec<EpisodeResult> = eval
        .iter()
        .map(|ep| run_episode(&OraclePolicy, ep, bt))
        .collect();
    let value = acr(&results)?;
    writeln!(file, "oracle,{},{},{}", cfg.pair, cfg.split, value)?;
    println!("oracle {} {}: ACR {:.6}", cfg.pair, cfg.split, value);

    for n in parse_grid(oracle_n, "oracle-n")? {
        let policy = fxliq::OracleNPolicy { n };
        let results: Vec<EpisodeResult> = eval
            .iter()
            .map(|ep| run_episode(&policy, ep, bt))
            .collect();
        let value = acr(&results)?;
        writeln!(file, "oracle-{n},{},{},{}", cfg.pair, cfg.split, value)?;
        println!("oracle-{n} {} {}: ACR {:.6}", cfg.pair, cfg.split, value);
    }
    drop(file);
    cfg.write_echo(&cfg.out.join(format!("config-oracle-{}.txt", cfg.pair)))?;
    Ok(())
}
