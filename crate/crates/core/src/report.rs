//! Run manifests, layered configuration, histogram reports and ablation grids.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::OfflineDataset;
use crate::env::{EnvSpec, ReferenceReturns};
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, mean_std, Basis, CellResult, EvalConfig, Target};
use crate::trainer::{train, TrainConfig};
use crate::weighting::{bin_probabilities, resolve_kappa, KappaSpec, WeightingConfig};

pub const SEED_ENV: &str = "CWBC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64, started_unix: u64) -> RunManifest {
        RunManifest {
            command: command.into(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix,
            finished_unix: started_unix,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }
}

/// Contents of a configuration file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    /// File contents when a path is given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        path.map(RunConfig::load).unwrap_or_else(|| Ok(RunConfig::default()))
    }

    /// Replaces the training and evaluation seeds with `CWBC_SEED` when set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.train.seed = seed;
            self.eval.seed = seed;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub bin_index: usize,
    pub mean_return: f64,
    pub frequency: f64,
    pub probability: f64,
}

/// Original bin frequencies next to their reweighted sampling probabilities.
pub fn report_histograms(dataset: &OfflineDataset, cfg: &WeightingConfig) -> Result<Vec<HistogramRow>> {
    let layout = cfg.layout(dataset)?;
    let probs = layout
        .probabilities()
        .expect("layout() sets probabilities")
        .to_vec();
    Ok((0..layout.num_bins())
        .map(|b| HistogramRow {
            bin_index: b,
            mean_return: layout.mean_returns()[b],
            frequency: layout.frequencies()[b],
            probability: probs[b],
        })
        .collect())
}

pub fn write_histogram_csv<W: Write>(rows: &[HistogramRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Probabilities for an explicit `(lambda, kappa)` pair, bypassing config validation.
pub fn histogram_with(dataset: &OfflineDataset, num_bins: usize, lambda: f64, kappa: f64) -> Result<Vec<HistogramRow>> {
    let layout = crate::weighting::build_bins(dataset, num_bins)?;
    let probs = bin_probabilities(&layout, lambda, kappa, dataset.stats().max_return)?;
    Ok((0..layout.num_bins())
        .map(|b| HistogramRow {
            bin_index: b,
            mean_return: layout.mean_returns()[b],
            frequency: layout.frequencies()[b],
            probability: probs[b],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationParam {
    /// Percentile `z` in `kappa = r_star - r_z`.
    Kappa,
    Lambda,
    /// Conservatism percentile.
    Q,
    Alpha,
    Sigma,
}

impl FromStr for AblationParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<AblationParam> {
        Ok(match s {
            "kappa" => AblationParam::Kappa,
            "lambda" => AblationParam::Lambda,
            "q" => AblationParam::Q,
            "alpha" => AblationParam::Alpha,
            "sigma" => AblationParam::Sigma,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown ablation parameter {s:?}; expected kappa, lambda, q, alpha or sigma"
                )))
            }
        })
    }
}

impl std::fmt::Display for AblationParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationParam::Kappa => "kappa",
            AblationParam::Lambda => "lambda",
            AblationParam::Q => "q",
            AblationParam::Alpha => "alpha",
            AblationParam::Sigma => "sigma",
        })
    }
}

fn as_percentile(param: AblationParam, v: f64) -> Result<u8> {
    if v.fract() == 0.0 && (0.0..=100.0).contains(&v) {
        Ok(v as u8)
    } else {
        Err(Error::invalid(format!("{param} value {v} must be an integer percentile in 0..=100")))
    }
}

/// `base` with one parameter replaced.
pub fn apply_param(base: &TrainConfig, param: AblationParam, value: f64) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match param {
        AblationParam::Kappa => cfg.weighting.kappa = KappaSpec::PercentileGap(as_percentile(param, value)?),
        AblationParam::Lambda => cfg.weighting.lambda = value,
        AblationParam::Q => cfg.conservatism.percentile_q = as_percentile(param, value)?,
        AblationParam::Alpha => cfg.conservatism.alpha = value,
        AblationParam::Sigma => cfg.conservatism.noise_std = Some(value),
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSetup<'a> {
    pub dataset: &'a OfflineDataset,
    pub env: &'a EnvSpec,
    pub refs: ReferenceReturns,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub parameter: String,
    pub value: f64,
    pub seeds: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_normalized: f64,
    pub ood_drop: f64,
    pub failures: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub files: Vec<PathBuf>,
}

/// File-name form of a grid value (`0.01` stays `0.01`, `1e9` becomes `1000000000`).
fn value_tag(v: f64) -> String {
    v.to_string()
}

/// Trains and evaluates every value of `param` on the shared seeds.
///
/// Writes `curve_<param>_<value>.csv` (seed-averaged sweep: `target,mean,std,normalized`
/// with `std` taken across seeds), `summary_<param>.csv`, and for `kappa` and
/// `lambda` also `hist_<param>_<value>.csv`. A failing cell is reported in the
/// summary and the grid continues.
pub fn run_ablation(param: AblationParam, values: &[f64], setup: &AblationSetup<'_>, out_dir: &Path) -> Result<AblationReport> {
    if values.is_empty() {
        return Err(Error::invalid("ablation needs at least one value"));
    }
    if setup.seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("ablation values must be finite"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let basis = Basis {
        dataset_max: setup.dataset.stats().max_return,
        refs: setup.refs,
    };
    let mut report = AblationReport {
        rows: Vec::new(),
        files: Vec::new(),
    };
    for &value in values {
        let tag = value_tag(value);
        let mut errors = Vec::new();
        let mut cells: Vec<CellResult> = Vec::new();
        match apply_param(&setup.train, param, value) {
            Err(e) => errors.push(e.to_string()),
            Ok(cfg) => {
                if matches!(param, AblationParam::Kappa | AblationParam::Lambda) {
                    let path = out_dir.join(format!("hist_{param}_{tag}.csv"));
                    let rows = report_histograms(setup.dataset, &cfg.weighting)?;
                    write_file(&path, |w| write_histogram_csv(&rows, w))?;
                    report.files.push(path);
                }
                for &seed in &setup.seeds {
                    let tc = TrainConfig { seed, ..cfg.clone() };
                    match train(setup.dataset, &tc)
                        .and_then(|o| evaluate_policy(&o.policy, setup.env, &basis, Target::Expert(1.0), &setup.eval))
                    {
                        Ok(c) => cells.push(c),
                        Err(e) => errors.push(format!("seed {seed}: {e}")),
                    }
                }
            }
        }
        if !cells.is_empty() {
            let path = out_dir.join(format!("curve_{param}_{tag}.csv"));
            write_file(&path, |w| write_seed_curve(&cells, w))?;
            report.files.push(path);
        }
        let heads: Vec<f64> = cells.iter().map(|c| c.headline.mean).collect();
        let norms: Vec<f64> = cells.iter().map(|c| c.headline.normalized).collect();
        let drops: Vec<f64> = cells.iter().filter_map(|c| c.ood_drop).collect();
        let (mean_return, std_return) = if heads.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&heads) };
        let avg = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        report.rows.push(AblationRow {
            parameter: param.to_string(),
            value,
            seeds: cells.len(),
            mean_return,
            std_return,
            mean_normalized: avg(&norms),
            ood_drop: avg(&drops),
            failures: errors.len(),
            error: errors.join("; "),
        });
    }
    let path = out_dir.join(format!("summary_{param}.csv"));
    write_file(&path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in &report.rows {
            csv.serialize(r)?;
        }
        csv.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    })?;
    report.files.push(path);
    Ok(report)
}

fn write_seed_curve<W: Write>(cells: &[CellResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["target", "mean", "std", "normalized"])?;
    for (k, rec) in cells[0].curve.records.iter().enumerate() {
        let means: Vec<f64> = cells.iter().map(|c| c.curve.records[k].stats.mean).collect();
        let norms: Vec<f64> = cells.iter().map(|c| c.curve.records[k].stats.normalized).collect();
        let (mean, std) = mean_std(&means);
        let (normalized, _) = mean_std(&norms);
        w.write_record([
            rec.stats.target.to_string(),
            mean.to_string(),
            std.to_string(),
            normalized.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Creates `path` and hands a writer to `body`.
pub fn write_file(path: &Path, body: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    body(&mut file)?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Kappa actually used for the given weighting configuration.
pub fn effective_kappa(dataset: &OfflineDataset, cfg: &WeightingConfig) -> f64 {
    resolve_kappa(dataset.stats(), cfg.kappa)
}
