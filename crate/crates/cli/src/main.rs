use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cwbc::data::OfflineDataset;
use cwbc::env::{generate_dataset, reference_returns, DatasetRecipe, EnvSpec, ReferenceReturns, RECIPES};
use cwbc::eval::{compare_variants, evaluate_target, sweep_targets, Basis, CompareConfig, Target};
use cwbc::oracle::{verify, write_reports, Suite};
use cwbc::policy::RvsPolicy;
use cwbc::report::{
    report_histograms, run_ablation, unix_now, write_file, write_histogram_csv, AblationParam, AblationSetup,
    RunConfig, RunManifest,
};
use cwbc::trainer::{train, Variant};
use cwbc::weighting::KappaSpec;
use cwbc::{Error, Result};

#[derive(Parser)]
#[command(name = "cwbc", version, about = "Return-conditioned behavioral cloning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset from a behavior-policy mixture.
    GenData(GenData),
    /// Train a policy on a dataset.
    Train(TrainCmd),
    /// Evaluate a checkpoint at one conditioning target.
    Eval(EvalCmd),
    /// Evaluate a checkpoint across the target sweep.
    Sweep(SweepCmd),
    /// Train and compare variants over several seeds.
    Compare(CompareCmd),
    /// Sweep one hyperparameter over a grid of values.
    Ablate(AblateCmd),
    /// Write bin frequencies and reweighted probabilities.
    ReportHist(ReportHistCmd),
    /// Run the built-in consistency checks.
    Verify(VerifyCmd),
}

#[derive(Args)]
struct EnvArg {
    /// Built-in environment name (lineworld, planeworld) or a TOML spec file.
    #[arg(long, default_value = "lineworld")]
    env: String,
}

impl EnvArg {
    fn load(&self) -> Result<EnvSpec> {
        match EnvSpec::builtin(&self.env) {
            Some(spec) => Ok(spec),
            None => {
                let path = Path::new(&self.env);
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.into(),
                    source: e,
                })?;
                EnvSpec::from_toml_str(&text)
            }
        }
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    env: EnvArg,
    #[arg(long, default_value = "med-replay", value_parser = clap::builder::PossibleValuesParser::new(RECIPES))]
    recipe: String,
    #[arg(long, default_value_t = 2000)]
    trajectories: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Flags layered over the configuration file.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML file with [train] and [eval] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, visible_alias = "iters")]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    num_bins: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Percentile z for kappa = r_star - r_z.
    #[arg(long)]
    kappa_percentile: Option<u8>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    q: Option<u8>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    filter_fraction: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
}

impl ConfigArgs {
    /// File, then `CWBC_SEED`, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        cfg.apply_seed_env()?;
        let t = &mut cfg.train;
        if let Some(s) = self.seed {
            t.seed = s;
            cfg.eval.seed = s;
        }
        set(&mut t.iterations, self.iterations);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.variant, self.variant);
        set(&mut t.hidden, self.hidden.clone());
        set(&mut t.dropout, self.dropout);
        set(&mut t.optimizer.learning_rate, self.learning_rate);
        set(&mut t.weighting.num_bins, self.num_bins);
        set(&mut t.weighting.lambda, self.lambda);
        if let Some(z) = self.kappa_percentile {
            t.weighting.kappa = KappaSpec::PercentileGap(z);
        }
        if let Some(k) = self.kappa {
            t.weighting.kappa = KappaSpec::Explicit(k);
        }
        set(&mut t.conservatism.percentile_q, self.q);
        set(&mut t.conservatism.alpha, self.alpha);
        if self.sigma.is_some() {
            t.conservatism.noise_std = self.sigma;
        }
        set(&mut t.filter_fraction, self.filter_fraction);
        set(&mut cfg.eval.episodes, self.episodes);
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Checkpoint destination.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; defaults to the checkpoint path with a `.log.csv` suffix.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Fill the wall-clock column of the training log.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct RefArgs {
    /// Episodes used to estimate the random and expert reference returns.
    #[arg(long, default_value_t = 100)]
    ref_episodes: usize,
    #[arg(long, default_value_t = 0)]
    ref_seed: u64,
}

impl RefArgs {
    fn compute(&self, env: &EnvSpec) -> Result<ReferenceReturns> {
        reference_returns(env, self.ref_episodes, self.ref_seed)
    }
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    env: EnvArg,
    /// expert, max, absolute:G, max:M or expert:M.
    #[arg(long, default_value = "expert")]
    target: Target,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset for targets relative to the highest offline return.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    refs: RefArgs,
}

#[derive(Args)]
struct SweepCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    env: EnvArg,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    refs: RefArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareCmd {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    env: EnvArg,
    #[arg(long, value_delimiter = ',', default_value = "base,w,c,wc")]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    refs: RefArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long)]
    param: AblationParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    env: EnvArg,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    refs: RefArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportHistCmd {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyCmd {
    #[arg(long, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn load_policy(path: &Path) -> Result<RvsPolicy> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    RvsPolicy::from_json(&text)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let started = unix_now();
    match cli.command {
        Command::GenData(a) => {
            let env = a.env.load()?;
            let mut cfg = RunConfig::default();
            cfg.apply_seed_env()?;
            let seed = a.seed.unwrap_or(cfg.train.seed);
            let recipe = DatasetRecipe::named(&a.recipe, env, a.trajectories, seed)?;
            let ds = generate_dataset(&recipe)?;
            ds.write_jsonl(&a.out)?;
            let mut m = RunManifest::new("gen-data", &recipe, seed, started);
            m.add_output(&a.out);
            m.write(&manifest_path(&a.out))?;
            Ok(json!({"trajectories": ds.len(), "max_return": ds.stats().max_return, "out": a.out}))
        }
        Command::Train(a) => {
            let cfg = a.cfg.resolve()?;
            let ds = OfflineDataset::load(&a.data)?;
            let out = train(&ds, &cfg.train)?;
            let log = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.csv"));
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let text = out.policy.to_json(Some(cfg.train.fingerprint()));
            fs::write(&a.out, text).map_err(|e| Error::Io {
                path: a.out.clone(),
                source: e,
            })?;
            out.log.save_csv(&log, a.timing)?;
            let mut m = RunManifest::new("train", &cfg, cfg.train.seed, started);
            m.add_input(&a.data)?;
            m.add_output(&a.out);
            m.add_output(&log);
            m.write(&manifest_path(&a.out))?;
            let last = out.log.records.last().map(|r| r.total_loss);
            Ok(json!({"checkpoint": a.out, "log": log, "final_loss": last, "train_set_size": out.train_set_size}))
        }
        Command::Eval(a) => {
            let env = a.env.load()?;
            let policy = load_policy(&a.ckpt)?;
            let refs = a.refs.compute(&env)?;
            let dataset_max = match (&a.data, a.target) {
                (Some(p), _) => OfflineDataset::load(p)?.stats().max_return,
                (None, Target::DatasetMax(_)) => {
                    return Err(Error::InvalidInput("targets relative to the dataset maximum need --data".into()))
                }
                (None, _) => f64::NAN,
            };
            let g = a.target.resolve(&Basis { dataset_max, refs });
            let seed = a.seed.unwrap_or(0);
            let stats = evaluate_target(&policy, &env, g, a.episodes, seed, &refs)?;
            Ok(json!({"target": stats.target, "mean": stats.mean, "std": stats.std, "normalized": stats.normalized}))
        }
        Command::Sweep(a) => {
            let cfg = a.cfg.resolve()?;
            let env = a.env.load()?;
            let policy = load_policy(&a.ckpt)?;
            let ds = OfflineDataset::load(&a.data)?;
            let basis = Basis {
                dataset_max: ds.stats().max_return,
                refs: a.refs.compute(&env)?,
            };
            let curve = sweep_targets(&policy, &env, &basis, &cfg.eval)?;
            write_file(&a.out, |w| curve.write_csv(w))?;
            let mut m = RunManifest::new("sweep", &cfg.eval, cfg.eval.seed, started);
            m.add_input(&a.ckpt)?;
            m.add_input(&a.data)?;
            m.add_output(&a.out);
            m.write(&manifest_path(&a.out))?;
            Ok(json!({"points": curve.records.len(), "ood_drop": curve.ood_drop_ratio(), "out": a.out}))
        }
        Command::Compare(a) => {
            let cfg = a.cfg.resolve()?;
            let env = a.env.load()?;
            let ds = OfflineDataset::load(&a.data)?;
            let refs = a.refs.compute(&env)?;
            let cc = CompareConfig {
                train: cfg.train.clone(),
                eval: cfg.eval.clone(),
                ..CompareConfig::default()
            };
            let report = compare_variants(&ds, &env, &a.variants, &a.seeds, refs, &cc)?;
            create_dir(&a.out_dir)?;
            let table = a.out_dir.join("compare.csv");
            write_file(&table, |w| report.write_csv(w))?;
            let mut m = RunManifest::new("compare", &cfg, cfg.train.seed, started);
            m.add_input(&a.data)?;
            m.add_output(&table);
            let mut failures = Vec::new();
            for cell in &report.cells {
                match &cell.result {
                    Ok(r) => {
                        let path = a.out_dir.join(format!("curve_{}_seed{}.csv", cell.variant, cell.seed));
                        write_file(&path, |w| r.curve.write_csv(w))?;
                        m.add_output(&path);
                    }
                    Err(e) => failures.push(json!({"variant": cell.variant, "seed": cell.seed, "error": e})),
                }
            }
            m.write(&a.out_dir.join("manifest.json"))?;
            Ok(json!({"rows": report.rows.len(), "failures": failures, "out": table}))
        }
        Command::Ablate(a) => {
            let cfg = a.cfg.resolve()?;
            let env = a.env.load()?;
            let ds = OfflineDataset::load(&a.data)?;
            let setup = AblationSetup {
                dataset: &ds,
                env: &env,
                refs: a.refs.compute(&env)?,
                train: cfg.train.clone(),
                eval: cfg.eval.clone(),
                seeds: a.seeds.clone(),
            };
            let report = run_ablation(a.param, &a.values, &setup, &a.out_dir)?;
            let mut m = RunManifest::new(
                "ablate",
                &json!({"param": a.param, "values": a.values, "seeds": a.seeds, "run": cfg}),
                cfg.train.seed,
                started,
            );
            m.add_input(&a.data)?;
            for f in &report.files {
                m.add_output(f);
            }
            m.write(&a.out_dir.join("manifest.json"))?;
            let failures: usize = report.rows.iter().map(|r| r.failures).sum();
            Ok(json!({"values": report.rows.len(), "failed_cells": failures, "out_dir": a.out_dir}))
        }
        Command::ReportHist(a) => {
            let cfg = a.cfg.resolve()?;
            let ds = OfflineDataset::load(&a.data)?;
            let rows = report_histograms(&ds, &cfg.train.weighting)?;
            write_file(&a.out, |w| write_histogram_csv(&rows, w))?;
            let mut m = RunManifest::new("report-hist", &cfg.train.weighting, cfg.train.seed, started);
            m.add_input(&a.data)?;
            m.add_output(&a.out);
            m.write(&manifest_path(&a.out))?;
            Ok(json!({"bins": rows.len(), "out": a.out}))
        }
        Command::Verify(a) => {
            let reports = verify(a.suite, a.seed)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.oracle.as_str()).collect();
            match &a.out {
                Some(p) => write_file(p, |w| write_reports(&reports, w))?,
                None => write_reports(&reports, std::io::stdout().lock())?,
            }
            if !failed.is_empty() {
                return Err(Error::InvalidInput(format!("checks failed: {}", failed.join(", "))));
            }
            Ok(json!({"checks": reports.len(), "failed": 0}))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = matches!(&cli.command, Command::Verify(v) if v.out.is_none());
    match run(cli) {
        Ok(summary) => {
            if !quiet {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
