//! Conditioned rollouts, target-return sweeps and variant comparisons.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::OfflineDataset;
use crate::env::{step, EnvSpec, ReferenceReturns};
use crate::error::{Error, Result};
use crate::policy::RvsPolicy;
use crate::rng::{stream, Stream};
use crate::trainer::{train, TrainConfig, Variant};

/// A single conditioned episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub target: f64,
    pub total_return: f64,
    /// `omega_t` fed to the policy at each step.
    pub omegas: Vec<f64>,
    /// Remaining return `g_t` at each step.
    pub remaining: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl Rollout {
    /// Checks `omega_t = (G - r_1 - ... - r_{t-1}) / (H - t + 1)` at every step.
    ///
    /// The left fold is compared exactly; the closed form `G - Σ r` agrees up
    /// to summation rounding.
    pub fn check_bookkeeping(&self, horizon: usize) -> Result<()> {
        let mut folded = self.target;
        let mut sum = 0.0;
        for (t, (&omega, &r)) in self.omegas.iter().zip(&self.rewards).enumerate() {
            let remaining = (horizon - t) as f64;
            if omega != folded / remaining || self.remaining[t] != folded {
                return Err(Error::invalid(format!(
                    "step {}: omega {omega} differs from recomputed {}",
                    t + 1,
                    folded / remaining
                )));
            }
            let closed = (self.target - sum) / remaining;
            if (omega - closed).abs() > 1e-12 * closed.abs().max(1.0) {
                return Err(Error::invalid(format!(
                    "step {}: omega {omega} differs from closed form {closed}",
                    t + 1
                )));
            }
            folded -= r;
            sum += r;
        }
        Ok(())
    }
}

/// Runs exactly `H` steps conditioned on target return `target`.
pub fn rollout_conditioned<R: rand::Rng + ?Sized>(
    policy: &RvsPolicy,
    env: &EnvSpec,
    target: f64,
    rng: &mut R,
) -> Result<Rollout> {
    if policy.state_dim() != env.state_dim || policy.action_dim() != env.action_dim {
        return Err(Error::invalid("policy and environment dimensions differ"));
    }
    if policy.horizon() != env.horizon {
        return Err(Error::invalid(format!(
            "policy horizon {} differs from environment horizon {}",
            policy.horizon(),
            env.horizon
        )));
    }
    let h = env.horizon;
    let mut state = env.reset(rng);
    let mut g = target;
    let mut out = Rollout {
        target,
        total_return: 0.0,
        omegas: Vec::with_capacity(h),
        remaining: Vec::with_capacity(h),
        rewards: Vec::with_capacity(h),
    };
    for t in 1..=h {
        let omega = g / (h - t + 1) as f64;
        let action = policy.predict_action(&state, omega)?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("policy produced a non-finite action at step {t}")));
        }
        let (next, reward) = step(env, &state, &action, rng);
        out.omegas.push(omega);
        out.remaining.push(g);
        out.rewards.push(reward);
        out.total_return += reward;
        g -= reward;
        state = next;
    }
    debug_assert!(out.check_bookkeeping(h).is_ok());
    Ok(out)
}

/// `100 * (raw - random) / (expert - random)`.
pub fn normalized_score(raw: f64, random_ref: f64, expert_ref: f64) -> Result<f64> {
    let span = expert_ref - random_ref;
    if !(span.abs() > 0.0) || !span.is_finite() {
        return Err(Error::invalid("expert and random references must differ"));
    }
    Ok(100.0 * (raw - random_ref) / span)
}

/// A conditioning target, absolute or relative to a reference return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Absolute(f64),
    /// Multiple of the dataset's highest return.
    DatasetMax(f64),
    /// Multiple of the expert reference return.
    Expert(f64),
}

impl Target {
    pub fn resolve(self, basis: &Basis) -> f64 {
        match self {
            Target::Absolute(g) => g,
            Target::DatasetMax(m) => m * basis.dataset_max,
            Target::Expert(m) => m * basis.refs.expert,
        }
    }

    pub fn label(self) -> String {
        match self {
            Target::Absolute(g) => format!("absolute:{g}"),
            Target::DatasetMax(m) => format!("{m}x_max"),
            Target::Expert(m) => format!("{m}x_expert"),
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    /// Accepts `expert`, `max`, `absolute:G`, `max:M` and `expert:M`.
    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::invalid(format!("bad number in target {s:?}")))
        };
        match s.split_once(':') {
            None if s == "expert" => Ok(Target::Expert(1.0)),
            None if s == "max" => Ok(Target::DatasetMax(1.0)),
            Some(("absolute", v)) => Ok(Target::Absolute(num(v)?)),
            Some(("max", v)) => Ok(Target::DatasetMax(num(v)?)),
            Some(("expert", v)) => Ok(Target::Expert(num(v)?)),
            _ => Err(Error::invalid(format!(
                "unknown target {s:?}; use expert, max or absolute:G"
            ))),
        }
    }
}

/// Reference values that relative targets and normalized scores use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub dataset_max: f64,
    pub refs: ReferenceReturns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub sweep: Vec<Target>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 10,
            seed: 0,
            sweep: default_sweep(),
        }
    }
}

/// `{0.2, 0.4, 0.6, 0.8, 1.0, 1.25, 1.5, 2.0} x r_star` and `{1, 2} x expert`.
pub fn default_sweep() -> Vec<Target> {
    [0.2, 0.4, 0.6, 0.8, 1.0, 1.25, 1.5, 2.0]
        .into_iter()
        .map(Target::DatasetMax)
        .chain([Target::Expert(1.0), Target::Expert(2.0)])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub target: f64,
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
    pub normalized: f64,
}

/// `episodes` rollouts at one target; episode `e` uses stream `(seed, e)`.
pub fn evaluate_target(
    policy: &RvsPolicy,
    env: &EnvSpec,
    target: f64,
    episodes: usize,
    seed: u64,
    refs: &ReferenceReturns,
) -> Result<EpisodeStats> {
    if episodes == 0 {
        return Err(Error::invalid("episodes must be at least 1"));
    }
    let returns = (0..episodes)
        .map(|e| {
            let mut rng = stream(seed, Stream::Eval, e as u64);
            rollout_conditioned(policy, env, target, &mut rng).map(|r| r.total_return)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&returns);
    Ok(EpisodeStats {
        target,
        mean,
        std,
        normalized: normalized_score(mean, refs.random, refs.expert)?,
    })
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub label: String,
    pub stats: EpisodeStats,
}

/// Achieved return as a function of the conditioning target.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub records: Vec<CurveRecord>,
}

impl ReliabilityCurve {
    pub fn get(&self, label: &str) -> Option<&EpisodeStats> {
        self.records.iter().find(|r| r.label == label).map(|r| &r.stats)
    }

    pub fn best_mean(&self) -> f64 {
        self.records.iter().map(|r| r.stats.mean).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean return at `2 x r_star` divided by the best mean over the sweep.
    pub fn ood_drop_ratio(&self) -> Option<f64> {
        let at = self.get(&Target::DatasetMax(2.0).label())?;
        let best = self.best_mean();
        (best > 0.0).then(|| at.mean / best)
    }

    /// Columns `target,mean,std,normalized`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["target", "mean", "std", "normalized"])?;
        for r in &self.records {
            let s = &r.stats;
            w.write_record([
                s.target.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
                s.normalized.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn sweep_targets(policy: &RvsPolicy, env: &EnvSpec, basis: &Basis, cfg: &EvalConfig) -> Result<ReliabilityCurve> {
    let records = cfg
        .sweep
        .iter()
        .map(|&t| {
            let g = t.resolve(basis);
            evaluate_target(policy, env, g, cfg.episodes, cfg.seed, &basis.refs).map(|stats| CurveRecord {
                label: t.label(),
                stats,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReliabilityCurve { records })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Headline conditioning target.
    pub headline: Target,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            headline: Target::Expert(1.0),
        }
    }
}

/// One trained (variant, seed) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareCell {
    pub variant: Variant,
    pub seed: u64,
    pub result: std::result::Result<CellResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub headline: EpisodeStats,
    pub curve: ReliabilityCurve,
    pub ood_drop: Option<f64>,
    /// Per-episode return std at `2 x r_star`.
    pub std_at_double_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub seeds: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_normalized: f64,
    pub std_normalized: f64,
    /// Seeds on which the variant's headline return beats base; `None`
    /// when base is not part of the comparison.
    pub wins: Option<usize>,
    pub ood_drop: f64,
    pub std_at_double_max: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub cells: Vec<CompareCell>,
    pub rows: Vec<SummaryRow>,
}

impl CompareReport {
    pub fn cell(&self, variant: Variant, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.seed == seed)
            .and_then(|c| c.result.as_ref().ok())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "variant",
            "seeds",
            "mean_return",
            "std_return",
            "mean_normalized",
            "std_normalized",
            "wins",
            "ood_drop",
            "std_at_2x_max",
            "failures",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.variant.to_string(),
                r.seeds.to_string(),
                r.mean_return.to_string(),
                r.std_return.to_string(),
                r.mean_normalized.to_string(),
                r.std_normalized.to_string(),
                r.wins.map(|w| w.to_string()).unwrap_or_default(),
                r.ood_drop.to_string(),
                r.std_at_double_max.to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Evaluates a trained policy the way [`compare_variants`] does.
pub fn evaluate_policy(
    policy: &RvsPolicy,
    env: &EnvSpec,
    basis: &Basis,
    headline: Target,
    cfg: &EvalConfig,
) -> Result<CellResult> {
    let headline = evaluate_target(policy, env, headline.resolve(basis), cfg.episodes, cfg.seed, &basis.refs)?;
    let curve = sweep_targets(policy, env, basis, cfg)?;
    let ood_drop = curve.ood_drop_ratio();
    let std_at_double_max = curve.get(&Target::DatasetMax(2.0).label()).map(|s| s.std);
    Ok(CellResult {
        headline,
        curve,
        ood_drop,
        std_at_double_max,
    })
}

/// Trains every variant on every seed, evaluating at the headline target
/// and across the sweep. Cell failures are recorded, not propagated.
pub fn compare_variants(
    dataset: &OfflineDataset,
    env: &EnvSpec,
    variants: &[Variant],
    seeds: &[u64],
    refs: ReferenceReturns,
    cfg: &CompareConfig,
) -> Result<CompareReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::invalid("need at least one variant and one seed"));
    }
    let basis = Basis {
        dataset_max: dataset.stats().max_return,
        refs,
    };
    let mut cells = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let tc = TrainConfig {
                variant,
                seed,
                ..cfg.train.clone()
            };
            let result = train(dataset, &tc)
                .and_then(|out| evaluate_policy(&out.policy, env, &basis, cfg.headline, &cfg.eval))
                .map_err(|e| e.to_string());
            cells.push(CompareCell { variant, seed, result });
        }
    }
    let mut rows = Vec::new();
    let mut seen = Vec::new();
    for &variant in variants {
        if seen.contains(&variant) {
            // A repeated variant reproduces its first row exactly.
            let first = rows.iter().find(|r: &&SummaryRow| r.variant == variant).cloned();
            rows.extend(first);
            continue;
        }
        seen.push(variant);
        rows.push(summarize(&cells, variant, seeds, variants.contains(&Variant::Base)));
    }
    Ok(CompareReport { cells, rows })
}

fn summarize(cells: &[CompareCell], variant: Variant, seeds: &[u64], has_base: bool) -> SummaryRow {
    let first_ok = |v: Variant, s: u64| {
        cells
            .iter()
            .find(|c| c.variant == v && c.seed == s)
            .and_then(|c| c.result.as_ref().ok())
    };
    let ok: Vec<&CellResult> = seeds.iter().filter_map(|&s| first_ok(variant, s)).collect();
    let failures = seeds.len() - ok.len();
    let raw: Vec<f64> = ok.iter().map(|c| c.headline.mean).collect();
    let norm: Vec<f64> = ok.iter().map(|c| c.headline.normalized).collect();
    let (mean_return, std_return) = if raw.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&raw) };
    let (mean_normalized, std_normalized) = if norm.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&norm) };
    let avg = |xs: Vec<f64>| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let wins = has_base.then(|| {
        seeds
            .iter()
            .filter(|&&s| match (first_ok(variant, s), first_ok(Variant::Base, s)) {
                (Some(v), Some(b)) => v.headline.mean > b.headline.mean,
                _ => false,
            })
            .count()
    });
    SummaryRow {
        variant,
        seeds: ok.len(),
        mean_return,
        std_return,
        mean_normalized,
        std_normalized,
        wins,
        ood_drop: avg(ok.iter().filter_map(|c| c.ood_drop).collect()),
        std_at_double_max: avg(ok.iter().filter_map(|c| c.std_at_double_max).collect()),
        failures,
    }
}
