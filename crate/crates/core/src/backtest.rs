//! Episode simulation with full FC accounting (revenue arrival, sell-all
//! liquidation, no short selling, forced terminal sale), the ACR metric,
//! oracle reference policies, and cross-method ranking.

use std::io::Write;

use thiserror::Error;

use crate::baselines::{indicator_action, naive_action, Action, IndicatorSpec, NaiveStrategy};
use crate::data::Episode;

#[derive(Error, Debug)]
pub enum BacktestError {
    #[error("no results to aggregate")]
    EmptyResults,
    #[error("inconsistent episode sets: {0}")]
    InconsistentEpisodes(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can map (episode, step) to a hold/sell action using only
/// information available at that step.
pub trait Policy {
    fn act(&self, episode: &Episode, t: usize) -> Action;

    fn name(&self) -> String;

    /// Decision threshold in force, when the policy has one.
    fn threshold(&self) -> Option<f64> {
        None
    }
}

impl Policy for NaiveStrategy {
    fn act(&self, episode: &Episode, t: usize) -> Action {
        naive_action(*self, episode, t)
    }

    fn name(&self) -> String {
        self.to_string()
    }
}

impl Policy for IndicatorSpec {
    fn act(&self, episode: &Episode, t: usize) -> Action {
        indicator_action(*self, episode, t)
    }

    fn name(&self) -> String {
        self.to_string()
    }
}

/// Reference policy with full future knowledge: sell at t iff the current
/// rate is at least every later rate.
pub struct OraclePolicy;

pub fn oracle_policy(episode: &Episode, t: usize) -> Action {
    oracle_n_policy(episode, t, episode.horizon())
}

impl Policy for OraclePolicy {
    fn act(&self, episode: &Episode, t: usize) -> Action {
        oracle_policy(episode, t)
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

/// Oracle limited to the next n rates.
pub struct OracleNPolicy {
    pub n: usize,
}

pub fn oracle_n_policy(episode: &Episode, t: usize, n: usize) -> Action {
    let horizon = episode.horizon();
    assert!(t < horizon, "t out of range");
    let hi = t.saturating_add(n).min(horizon - 1);
    // Max over an empty window is -inf, so the final step always sells.
    let future_max = episode.norm_rates[t + 1..=hi.max(t)]
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if episode.norm(t) >= future_max {
        Action::Sell
    } else {
        Action::Hold
    }
}

impl Policy for OracleNPolicy {
    fn act(&self, episode: &Episode, t: usize) -> Action {
        oracle_n_policy(episode, t, self.n)
    }

    fn name(&self) -> String {
        format!("oracle-{}", self.n)
    }
}

/// When FC revenue arrives: one unit every step (default) or a single unit
/// on the first step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RevenueModel {
    #[default]
    UnitPerStep,
    UnitAtStart,
}

/// Payoff per unit sold at step t: excess over the first-day rate
/// (norm - 1, default) or the literal normalized rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RewardScale {
    #[default]
    Excess,
    Raw,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BacktestConfig {
    pub revenue: RevenueModel,
    pub scale: RewardScale,
}

/// Running account during one episode. FC never goes negative and cumulative
/// sales never exceed cumulative revenue.
#[derive(Clone, Copy, Debug, Default)]
pub struct AccountingState {
    pub fc_balance: f64,
    pub hc_earned: f64,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub episode_id: usize,
    pub method: String,
    pub cumulative_reward: f64,
    pub sell_times: Vec<usize>,
    pub threshold_used: Option<f64>,
    pub total_revenue: f64,
    pub total_sold: f64,
}

/// Simulate one episode. Revenue accrues at each step, a Sell (or the forced
/// terminal step) liquidates the whole balance at the current rate, and a
/// Sell with nothing accumulated is a no-op.
pub fn run_episode(policy: &dyn Policy, episode: &Episode, cfg: BacktestConfig) -> EpisodeResult {
    let horizon = episode.horizon();
    let mut acct = AccountingState::default();
    let mut sell_times = Vec::new();
    let mut total_revenue = 0.0;
    let mut total_sold = 0.0;
    for t in 0..horizon {
        acct.t = t;
        let revenue = match cfg.revenue {
            RevenueModel::UnitPerStep => 1.0,
            RevenueModel::UnitAtStart => (t == 0) as u8 as f64,
        };
        acct.fc_balance += revenue;
        total_revenue += revenue;

        let terminal = t == horizon - 1;
        let action = policy.act(episode, t);
        if (action == Action::Sell || terminal) && acct.fc_balance > 0.0 {
            let unit_payoff = match cfg.scale {
                RewardScale::Excess => episode.norm(t) - 1.0,
                RewardScale::Raw => episode.norm(t),
            };
            acct.hc_earned += acct.fc_balance * unit_payoff;
            total_sold += acct.fc_balance;
            acct.fc_balance = 0.0;
            sell_times.push(t);
        }
        debug_assert!(acct.fc_balance >= 0.0, "short sale");
    }
    EpisodeResult {
        episode_id: episode.id,
        method: policy.name(),
        cumulative_reward: acct.hc_earned,
        sell_times,
        threshold_used: policy.threshold(),
        total_revenue,
        total_sold,
    }
}

/// Average cumulative reward over one method/pair/split. Results are ordered
/// by episode id before reduction so the mean is independent of evaluation
/// order.
pub fn acr(results: &[EpisodeResult]) -> Result<f64, BacktestError> {
    if results.is_empty() {
        return Err(BacktestError::EmptyResults);
    }
    let mut rewards: Vec<(usize, f64)> = results
        .iter()
        .map(|r| (r.episode_id, r.cumulative_reward))
        .collect();
    rewards.sort_by_key(|(id, _)| *id);
    Ok(rewards.iter().map(|(_, r)| r).sum::<f64>() / rewards.len() as f64)
}

/// Fraction of steps on which the policy sold. 1.0 means the policy collapsed
/// to selling everywhere (the sell-immediately behavior).
pub fn sell_rate(results: &[EpisodeResult], horizon: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let sells: usize = results.iter().map(|r| r.sell_times.len()).sum();
    sells as f64 / (results.len() * horizon) as f64
}

/// Report a policy collapse when every step is a sell.
pub fn collapse_warning(results: &[EpisodeResult], horizon: usize) -> Option<String> {
    let rate = sell_rate(results, horizon);
    (rate >= 1.0).then(|| {
        format!(
            "policy collapse: {} sells at every step (sell rate 100%)",
            results.first().map(|r| r.method.as_str()).unwrap_or("?")
        )
    })
}

/// Per-episode rows for one method on one currency pair.
#[derive(Clone, Debug)]
pub struct MethodPairResults {
    pub method: String,
    pub pair: String,
    pub results: Vec<EpisodeResult>,
}

#[derive(Clone, Debug)]
pub struct RankingRow {
    pub method: String,
    /// ACR per pair, aligned with `RankingTable::pairs`.
    pub acr: Vec<f64>,
    /// Rank within each pair (ties get averaged ranks).
    pub ranks: Vec<f64>,
    pub overall_rank: f64,
}

/// Cross-method, cross-pair report, best overall rank first.
#[derive(Clone, Debug)]
pub struct RankingTable {
    pub pairs: Vec<String>,
    pub rows: Vec<RankingRow>,
}

/// Rank methods by ACR within each pair and average the ranks across pairs.
/// Every method must be evaluated on the identical episode set per pair.
pub fn compare(cells: &[MethodPairResults]) -> Result<RankingTable, BacktestError> {
    if cells.is_empty() {
        return Err(BacktestError::EmptyResults);
    }
    let mut pairs: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for cell in cells {
        if !pairs.contains(&cell.pair) {
            pairs.push(cell.pair.clone());
        }
        if !methods.contains(&cell.method) {
            methods.push(cell.method.clone());
        }
    }

    // Episode-set consistency within each pair.
    for pair in &pairs {
        let mut reference: Option<(String, Vec<usize>)> = None;
        for cell in cells.iter().filter(|c| &c.pair == pair) {
            let mut ids: Vec<usize> = cell.results.iter().map(|r| r.episode_id).collect();
            ids.sort_unstable();
            match &reference {
                None => reference = Some((cell.method.clone(), ids)),
                Some((ref_method, ref_ids)) => {
                    if *ref_ids != ids {
                        return Err(BacktestError::InconsistentEpisodes(format!(
                            "pair {pair}: {} and {} saw different episodes",
                            ref_method, cell.method
                        )));
                    }
                }
            }
        }
    }

    let mut acr_cell = vec![vec![f64::NAN; pairs.len()]; methods.len()];
    for cell in cells {
        let m = methods.iter().position(|x| x == &cell.method).unwrap();
        let p = pairs.iter().position(|x| x == &cell.pair).unwrap();
        acr_cell[m][p] = acr(&cell.results)?;
    }
    for (m, row) in acr_cell.iter().enumerate() {
        for (p, v) in row.iter().enumerate() {
            if v.is_nan() {
                return Err(BacktestError::InconsistentEpisodes(format!(
                    "method {} missing results for pair {}",
                    methods[m], pairs[p]
                )));
            }
        }
    }

    let mut rows: Vec<RankingRow> = methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let ranks: Vec<f64> = (0..pairs.len())
                .map(|p| {
                    let mine = acr_cell[m][p];
                    let greater = acr_cell.iter().filter(|r| r[p] > mine).count();
                    let equal = acr_cell.iter().filter(|r| r[p] == mine).count();
                    greater as f64 + (equal as f64 + 1.0) / 2.0
                })
                .collect();
            let overall_rank = ranks.iter().sum::<f64>() / ranks.len() as f64;
            RankingRow {
                method: method.clone(),
                acr: acr_cell[m].clone(),
                ranks,
                overall_rank,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.overall_rank
            .partial_cmp(&b.overall_rank)
            .unwrap()
            .then_with(|| a.method.cmp(&b.method))
    });
    Ok(RankingTable { pairs, rows })
}

impl RankingTable {
    /// Plain-text render: one row per method, ACR per pair, overall rank last.
    pub fn render_text(&self) -> String {
        let mut width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6);
        width = width.max(6);
        let mut out = String::new();
        out.push_str(&format!("{:<width$}", "Method"));
        for p in &self.pairs {
            out.push_str(&format!(" {:>9}", p));
        }
        out.push_str(&format!(" {:>7}\n", "Rank"));
        for row in &self.rows {
            out.push_str(&format!("{:<width$}", row.method));
            for v in &row.acr {
                out.push_str(&format!(" {:>9.3}", v));
            }
            out.push_str(&format!(" {:>7.3}\n", row.overall_rank));
        }
        out
    }

    /// `method,pair,acr` rows.
    pub fn write_acr_csv<W: Write>(&self, w: &mut W) -> Result<(), BacktestError> {
        writeln!(w, "method,pair,acr")?;
        for row in &self.rows {
            for (p, v) in self.pairs.iter().zip(row.acr.iter()) {
                writeln!(w, "{},{},{}", row.method, p, v)?;
            }
        }
        Ok(())
    }

    /// `method,overall_rank` rows, best first.
    pub fn write_rank_csv<W: Write>(&self, w: &mut W) -> Result<(), BacktestError> {
        writeln!(w, "method,overall_rank")?;
        for row in &self.rows {
            writeln!(w, "{},{}", row.method, row.overall_rank)?;
        }
        Ok(())
    }
}

/// `method,pair,split,episode_id,cumulative_reward,threshold` rows.
pub fn write_results_csv<W: Write>(
    results: &[EpisodeResult],
    pair: &str,
    split: &str,
    w: &mut W,
) -> Result<(), BacktestError> {
    writeln!(w, "method,pair,split,episode_id,cumulative_reward,threshold")?;
    let mut ordered: Vec<&EpisodeResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.episode_id);
    for r in ordered {
        let threshold = r.threshold_used.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.method, pair, split, r.episode_id, r.cumulative_reward, threshold
        )?;
    }
    Ok(())
}
