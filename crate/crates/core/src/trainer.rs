//! The training loop: weighted batch sampling plus the regularized objective.

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conservatism::ConservatismConfig;
use crate::data::OfflineDataset;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Mode};
use crate::policy::{Batch, Reduction, RvsPolicy};
use crate::rng::{stream, Stream};
use crate::weighting::{filter_top_fraction, BinLayout, WeightingConfig};

/// Which components are active: trajectory weighting (W), conservative
/// regularization (C) and hard top-fraction filtering (F).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    W,
    C,
    WC,
    F,
    FC,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Base, Variant::W, Variant::C, Variant::WC, Variant::F, Variant::FC];

    pub fn weighted(self) -> bool {
        matches!(self, Variant::W | Variant::WC)
    }

    pub fn conservative(self) -> bool {
        matches!(self, Variant::C | Variant::WC | Variant::FC)
    }

    pub fn filtered(self) -> bool {
        matches!(self, Variant::F | Variant::FC)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::W => "w",
            Variant::C => "c",
            Variant::WC => "wc",
            Variant::F => "f",
            Variant::FC => "fc",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| *c != '+').collect::<String>().to_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub variant: Variant,
    pub weighting: WeightingConfig,
    pub conservatism: ConservatismConfig,
    /// Fraction kept by the hard filter of the F variants.
    pub filter_fraction: f64,
    pub optimizer: AdamConfig,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub reduction: Reduction,
    pub max_timesteps_per_traj: Option<usize>,
    pub seed: u64,
    pub log_every: usize,
    #[serde(skip)]
    pub record_batches: bool,
}

impl Default for TrainConfig {
    /// Desk-scale profile: 2 x 64 hidden units, 20k iterations.
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 64,
            variant: Variant::WC,
            weighting: WeightingConfig::default(),
            conservatism: ConservatismConfig::default(),
            filter_fraction: 0.1,
            optimizer: AdamConfig::default(),
            hidden: vec![64, 64],
            dropout: 0.0,
            reduction: Reduction::PerTrajectory,
            max_timesteps_per_traj: None,
            seed: 0,
            log_every: 100,
            record_batches: false,
        }
    }
}

impl TrainConfig {
    /// Locomotion-scale profile: 2 x 1024 hidden units, 100k iterations.
    pub fn locomotion_scale() -> Self {
        TrainConfig {
            iterations: 100_000,
            hidden: vec![1024, 1024],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::invalid("iterations and batch size must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log interval must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if self.max_timesteps_per_traj == Some(0) {
            return Err(Error::invalid("timestep cap must be at least 1"));
        }
        if !(self.filter_fraction > 0.0 && self.filter_fraction <= 1.0) {
            return Err(Error::invalid("filter fraction must be in (0, 1]"));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr > 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate must be positive and weight decay nonnegative"));
        }
        self.weighting.validate()?;
        self.conservatism.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub bc_loss: f64,
    pub cons_loss: f64,
    pub total_loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Sampled trajectory indices (into the training set) per iteration,
    /// kept only when `record_batches` is set.
    pub batches: Option<Vec<Vec<usize>>>,
}

impl TrainLog {
    /// CSV with columns `iter,bc_loss,cons_loss,total_loss,ms`. Wall time is
    /// written only when `timing` is set, keeping default output reproducible.
    pub fn write_csv<W: Write>(&self, out: W, timing: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "bc_loss", "cons_loss", "total_loss", "ms"])?;
        for r in &self.records {
            let ms = if timing { format!("{:.3}", r.wall_ms) } else { String::new() };
            w.write_record([
                r.iter.to_string(),
                r.bc_loss.to_string(),
                r.cons_loss.to_string(),
                r.total_loss.to_string(),
                ms,
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, timing: bool) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f, timing)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: RvsPolicy,
    pub log: TrainLog,
    /// The data the policy was fit on (the filtered subset for F variants).
    pub train_set_size: usize,
}

enum Sampler {
    Uniform(usize),
    Weighted(BinLayout),
}

impl Sampler {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            Sampler::Uniform(n) => rng.random_range(0..*n),
            Sampler::Weighted(layout) => layout.sample_trajectory(rng),
        }
    }
}

/// Runs `config.iterations` optimizer steps, one minibatch each.
pub fn train(dataset: &OfflineDataset, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let variant = config.variant;
    // Noise scale defaults are taken from the full dataset, before filtering.
    let conservatism = if variant.conservative() {
        Some(config.conservatism.resolve(dataset.stats())?)
    } else {
        None
    };
    let train_set: Cow<'_, OfflineDataset> = if variant.filtered() {
        Cow::Owned(filter_top_fraction(dataset, config.filter_fraction)?)
    } else {
        Cow::Borrowed(dataset)
    };
    let sampler = if variant.weighted() {
        Sampler::Weighted(config.weighting.layout(&train_set)?)
    } else {
        Sampler::Uniform(train_set.len())
    };

    let mut init_rng = stream(config.seed, Stream::Init, 0);
    let mut sampler_rng = stream(config.seed, Stream::Sampler, 0);
    let mut noise_rng = stream(config.seed, Stream::Noise, 0);
    let mut dropout_rng = stream(config.seed, Stream::Dropout, 0);

    let mut policy = RvsPolicy::for_dataset(&train_set, &config.hidden, config.dropout, &mut init_rng)?;
    let mut adam = AdamState::new(policy.net(), config.optimizer);
    let mut log = TrainLog {
        records: Vec::new(),
        batches: config.record_batches.then(Vec::new),
    };
    let started = Instant::now();
    let trajs = train_set.trajectories();
    let stats = train_set.stats();

    for iter in 1..=config.iterations {
        let picks: Vec<usize> = (0..config.batch_size).map(|_| sampler.draw(&mut sampler_rng)).collect();
        let members = picks.iter().map(|&i| &trajs[i]);
        let batch = match config.max_timesteps_per_traj {
            Some(cap) => Batch::capped(members, cap, &mut sampler_rng),
            None => Batch::new(members),
        };
        let mode = if config.dropout > 0.0 {
            Mode::Train(&mut dropout_rng)
        } else {
            Mode::Inference
        };
        let value = policy.combined_objective(
            &batch,
            conservatism.as_ref().map(|c| (c, stats)),
            config.reduction,
            &mut noise_rng,
            mode,
        )?;
        if !value.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss diverged at iteration {iter} (bc {}, conservative {})",
                value.bc_loss, value.conservative_loss
            )));
        }
        if iter == 1 || iter % config.log_every == 0 || iter == config.iterations {
            log.records.push(LogRecord {
                iter,
                bc_loss: value.bc_loss,
                cons_loss: value.conservative_loss,
                total_loss: value.total,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        if let Some(b) = log.batches.as_mut() {
            b.push(picks);
        }
        adam.step(policy.net_mut(), &value.grads)?;
    }
    Ok(TrainOutput {
        policy,
        log,
        train_set_size: train_set.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Trajectory, Transition};
    use crate::weighting::KappaSpec;

    fn small_dataset(returns_scale: &[f64]) -> OfflineDataset {
        let trajs = returns_scale
            .iter()
            .map(|&k| {
                Trajectory::new(
                    (0..3)
                        .map(|t| Transition {
                            state: vec![t as f64 * 0.1, k],
                            action: vec![k.sin()],
                            reward: k,
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        OfflineDataset::new(trajs, 3).unwrap()
    }

    fn quick(variant: Variant) -> TrainConfig {
        TrainConfig {
            iterations: 30,
            batch_size: 4,
            variant,
            hidden: vec![8, 8],
            log_every: 10,
            seed: 5,
            weighting: WeightingConfig {
                num_bins: 3,
                ..WeightingConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("wc".parse::<Variant>().unwrap(), Variant::WC);
        assert_eq!("+W+C".parse::<Variant>().unwrap(), Variant::WC);
        assert_eq!("FC".parse::<Variant>().unwrap(), Variant::FC);
        assert!("x".parse::<Variant>().is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = small_dataset(&[0.1, 0.5, 0.9, 0.2, 0.7, 0.3]);
        for v in Variant::ALL {
            let a = train(&ds, &quick(v)).unwrap();
            let b = train(&ds, &quick(v)).unwrap();
            assert_eq!(a.policy, b.policy, "{v}");
            let strip = |l: &TrainLog| l.records.iter().map(|r| (r.iter, r.total_loss)).collect::<Vec<_>>();
            assert_eq!(strip(&a.log), strip(&b.log));
        }
    }

    #[test]
    fn log_schedule() {
        let ds = small_dataset(&[0.1, 0.5, 0.9]);
        let out = train(&ds, &TrainConfig { iterations: 25, ..quick(Variant::Base) }).unwrap();
        let iters: Vec<usize> = out.log.records.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![1, 10, 20, 25]);
        assert!(out.log.records.iter().all(|r| r.cons_loss == 0.0));
    }

    #[test]
    fn one_iteration_moves_parameters_iff_gradient_nonzero() {
        let ds = small_dataset(&[0.1, 0.5, 0.9]);
        let cfg = TrainConfig {
            iterations: 1,
            optimizer: AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            ..quick(Variant::Base)
        };
        let trained = train(&ds, &cfg).unwrap().policy;
        let mut rng = stream(cfg.seed, Stream::Init, 0);
        let init = RvsPolicy::for_dataset(&ds, &cfg.hidden, 0.0, &mut rng).unwrap();
        assert_ne!(trained, init);

        // Actions all zero and a zero-output network: gradient is exactly zero.
        let zero_actions: Vec<Trajectory> = ds
            .trajectories()
            .iter()
            .map(|t| {
                Trajectory::new(
                    t.transitions()
                        .iter()
                        .map(|tr| Transition {
                            action: vec![0.0],
                            ..tr.clone()
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let zds = OfflineDataset::new(zero_actions, 3).unwrap();
        let cfg0 = TrainConfig { hidden: vec![], ..cfg };
        let mut init = RvsPolicy::for_dataset(&zds, &[], 0.0, &mut stream(cfg0.seed, Stream::Init, 0)).unwrap();
        let n = init.net().num_params();
        init.net_mut().set_params_flat(&vec![0.0; n]).unwrap();
        let value = init.bc_loss(&Batch::new(zds.trajectories()), Reduction::PerTrajectory).unwrap();
        assert!(crate::nn::flatten(&value.grads).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn zero_mass_bin_never_sampled() {
        // Two bins; lambda 0 and a tiny kappa give the low bin zero mass.
        let ds = small_dataset(&[0.0, 0.0, 10.0, 10.0]);
        let cfg = TrainConfig {
            iterations: 1000,
            record_batches: true,
            weighting: WeightingConfig {
                num_bins: 2,
                lambda: 0.0,
                kappa: KappaSpec::Explicit(1e-3),
            },
            ..quick(Variant::WC)
        };
        let layout = cfg.weighting.layout(&ds).unwrap();
        assert_eq!(layout.probabilities().unwrap(), &[0.0, 1.0]);
        let out = train(&ds, &cfg).unwrap();
        let batches = out.log.batches.unwrap();
        assert_eq!(batches.len(), 1000);
        assert!(batches.iter().flatten().all(|&i| i == 2 || i == 3));
    }

    #[test]
    fn filtered_variants_train_on_subset() {
        let ds = small_dataset(&(0..20).map(|i| i as f64 * 0.05).collect::<Vec<_>>());
        let out = train(&ds, &quick(Variant::FC)).unwrap();
        assert_eq!(out.train_set_size, 2);
        assert_eq!(train(&ds, &quick(Variant::C)).unwrap().train_set_size, 20);
    }

    #[test]
    fn invalid_config_rejected() {
        let ds = small_dataset(&[0.1, 0.2]);
        assert!(train(&ds, &TrainConfig { iterations: 0, ..quick(Variant::Base) }).is_err());
        assert!(train(&ds, &TrainConfig { filter_fraction: 0.0, ..quick(Variant::F) }).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let ds = small_dataset(&[0.1, 0.5, 0.9]);
        let cfg = TrainConfig {
            optimizer: AdamConfig {
                learning_rate: 1e300,
                ..AdamConfig::default()
            },
            iterations: 50,
            ..quick(Variant::Base)
        };
        assert!(matches!(train(&ds, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = quick(Variant::WC);
        let b = TrainConfig { seed: 6, ..a.clone() };
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
