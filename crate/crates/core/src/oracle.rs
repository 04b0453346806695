//! Brute-force reference computations and the `verify` suite built on them.
//!
//! Nothing here calls the arithmetic it checks: bin probabilities are
//! recomputed in the log domain, gradients by central differences, and the
//! sampler by counting draws.

use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::conservatism::{noise_bounds, sample_noise, ResolvedConservatism};
use crate::data::{build_stats, Trajectory, Transition};
use crate::error::{Error, Result};
use crate::nn::{flatten, DenseNet, Mode};
use crate::policy::{Batch, Reduction, RvsPolicy};
use crate::rng::{stream, Stream};
use crate::weighting::{bin_probabilities, build_bins_from_returns, BinLayout};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub oracle: String,
    pub metric: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Passes when `measured <= bound`; NaN never passes.
    pub fn at_most(oracle: &str, metric: &str, measured: f64, bound: f64) -> OracleReport {
        OracleReport {
            oracle: oracle.into(),
            metric: metric.into(),
            measured,
            bound,
            pass: measured <= bound,
        }
    }
}

pub fn write_reports<W: Write>(reports: &[OracleReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Bin probabilities evaluated as `softmax(ln f - ln(f + lambda) - |r - r*| / kappa)`.
/// Empty bins get probability zero.
pub fn oracle_bin_probs(
    frequencies: &[f64],
    mean_returns: &[f64],
    lambda: f64,
    kappa: f64,
    r_star: f64,
) -> Result<Vec<f64>> {
    if frequencies.len() != mean_returns.len() || frequencies.is_empty() {
        return Err(Error::invalid("need one mean return per nonempty bin"));
    }
    if !(kappa > 0.0) || !(lambda >= 0.0) {
        return Err(Error::invalid("kappa must be positive and lambda nonnegative"));
    }
    let mut logs = Vec::with_capacity(frequencies.len());
    for i in 0..frequencies.len() {
        let f = frequencies[i];
        if f < 0.0 {
            return Err(Error::invalid("frequencies must be nonnegative"));
        }
        let gap = if mean_returns[i] > r_star {
            mean_returns[i] - r_star
        } else {
            r_star - mean_returns[i]
        };
        logs.push(if f == 0.0 {
            f64::NEG_INFINITY
        } else {
            -(1.0 + lambda / f).ln() - gap / kappa
        });
    }
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Err(Error::invalid("every bin is empty"));
    }
    let mut probs: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let mut total = 0.0;
    for p in &probs {
        total += p;
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Central differences of `loss` at `params`, one coordinate at a time.
pub fn oracle_finite_diff(loss: &mut dyn FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Total variation between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total variation between the empirical bin frequencies of `draws` sampler
/// calls and `reference`.
pub fn oracle_sampler_tv<R: Rng + ?Sized>(
    layout: &BinLayout,
    reference: &[f64],
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    if reference.len() != layout.num_bins() || draws == 0 {
        return Err(Error::invalid("reference must cover every bin and draws must be positive"));
    }
    let mut counts = vec![0u64; layout.num_bins()];
    for _ in 0..draws {
        counts[layout.sample_bin(rng)] += 1;
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    Ok(total_variation(&empirical, reference))
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over coordinates.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of [`oracle_noise_support`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseCheck {
    pub violations: usize,
    pub sample_std: f64,
}

/// Draws the conservatism noise `draws` times and counts perturbed initial
/// returns outside `[r_star, r_star + sqrt(12) * sigma]`.
pub fn oracle_noise_support<R: Rng + ?Sized>(
    r_tau: f64,
    r_star: f64,
    sigma: f64,
    draws: usize,
    rng: &mut R,
) -> Result<NoiseCheck> {
    let bounds = noise_bounds(r_tau, r_star, sigma)?;
    let ceiling = r_star + 12f64.sqrt() * sigma;
    let mut violations = 0;
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..draws {
        let e = sample_noise(bounds, rng);
        let g = r_tau + e;
        if !(g >= r_star && g <= ceiling) {
            violations += 1;
        }
        let d = e - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (e - mean);
    }
    Ok(NoiseCheck {
        violations,
        sample_std: (m2 / draws as f64).sqrt(),
    })
}

/// Returns shaped like a mixed-quality offline dataset: a broad low mode and
/// a narrow high mode.
pub fn fixture_returns(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Oracle, 0);
    (0..n)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            if i % 4 == 0 {
                80.0 + 5.0 * z
            } else {
                40.0 + 15.0 * z
            }
        })
        .collect()
}

/// A random policy and batch for gradient checks. Returns the batch's
/// trajectories, which the caller wraps in a [`Batch`].
pub fn gradient_fixture(seed: u64) -> Result<(RvsPolicy, Vec<Trajectory>)> {
    let mut rng = stream(seed, Stream::Oracle, 1);
    let ds = rng.random_range(1..=3usize);
    let da = rng.random_range(1..=2usize);
    let horizon = rng.random_range(3..=6usize);
    let depth = rng.random_range(0..=2usize);
    let mut dims = vec![ds + 1];
    dims.extend((0..depth).map(|_| rng.random_range(2..=6usize)));
    dims.push(da);
    let dropout = if seed % 2 == 0 { 0.0 } else { 0.3 };
    let mut net = DenseNet::init(&dims, dropout, &mut rng)?;
    let jittered: Vec<f64> = net
        .params_flat()
        .into_iter()
        .map(|p| p + rng.random_range(-0.2..0.2))
        .collect();
    net.set_params_flat(&jittered)?;
    let mean: Vec<f64> = (0..ds).map(|_| rng.random_range(-0.5..0.5)).collect();
    let std: Vec<f64> = (0..ds).map(|_| rng.random_range(0.5..2.0)).collect();
    let policy = RvsPolicy::new(net, mean, std, horizon)?;
    let count = rng.random_range(2..=5usize);
    let trajs = (0..count)
        .map(|_| {
            let len = rng.random_range(1..=horizon);
            Trajectory::new(
                (0..len)
                    .map(|_| Transition {
                        state: (0..ds).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        action: (0..da).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        reward: rng.random_range(0.0..1.0),
                    })
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((policy, trajs))
}

/// Central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Max relative error between the analytic gradient of `L_bc + alpha * C`
/// (noise drawn once and then frozen) and central differences.
pub fn combined_gradient_error(seed: u64, reduction: Reduction) -> Result<f64> {
    combined_gradient_error_with_step(seed, reduction, FD_STEP)
}

/// [`combined_gradient_error`] with an explicit difference step.
pub fn combined_gradient_error_with_step(seed: u64, reduction: Reduction, h: f64) -> Result<f64> {
    let (policy, trajs) = gradient_fixture(seed)?;
    let stats = build_stats(&trajs)?;
    let cons = ResolvedConservatism {
        percentile_q: 50,
        sigma: 0.5,
        alpha: 0.5 + (seed % 3) as f64,
    };
    let batch = Batch::new(&trajs);
    let draws = crate::conservatism::draw_offsets(&batch, &cons, &stats, &mut stream(seed, Stream::Noise, 0))?;
    let bc = policy.bc_rows(&batch, reduction)?;
    let cr = policy.conditioned_rows(&batch, &draws.members, &draws.offsets, reduction)?;
    let segments = [(&bc, 1.0), (&cr, cons.alpha)];
    let mask_seed = seed ^ 0x5eed;
    let eval = |p: &RvsPolicy| -> Result<crate::policy::ObjectiveValue> {
        let mut mask_rng = stream(mask_seed, Stream::Dropout, 0);
        p.objective_with_mode(&segments, Mode::Train(&mut mask_rng))
    };
    let analytic = flatten(&eval(&policy)?.grads);

    // Cross-check: the sampling entry point reproduces the frozen-noise value.
    let mut mask_rng = stream(mask_seed, Stream::Dropout, 0);
    let combined = policy.combined_objective(
        &batch,
        Some((&cons, &stats)),
        reduction,
        &mut stream(seed, Stream::Noise, 0),
        Mode::Train(&mut mask_rng),
    )?;
    if flatten(&combined.grads) != analytic {
        return Err(Error::invalid("combined objective disagrees with frozen-noise evaluation"));
    }

    let params = policy.net().params_flat();
    let mut probe = policy.clone();
    let mut loss = |theta: &[f64]| {
        probe.net_mut().set_params_flat(theta).expect("same shape");
        eval(&probe).map(|v| v.total).unwrap_or(f64::NAN)
    };
    let numeric = oracle_finite_diff(&mut loss, &params, h);
    Ok(max_relative_error(&analytic, &numeric, 1e-6))
}

/// Named groups of checks run by `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Sampler,
    Limits,
    Gradients,
    Noise,
    Reductions,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Suite> {
        Ok(match s {
            "all" => Suite::All,
            "sampler" => Suite::Sampler,
            "limits" => Suite::Limits,
            "gradients" => Suite::Gradients,
            "noise" => Suite::Noise,
            "reductions" => Suite::Reductions,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown suite {s:?}; expected all, sampler, limits, gradients, noise or reductions"
                )))
            }
        })
    }
}

pub fn verify(suite: Suite, seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Sampler {
        out.extend(verify_sampler(seed)?);
    }
    if all || suite == Suite::Limits {
        out.extend(verify_limits(seed)?);
    }
    if all || suite == Suite::Gradients {
        out.extend(verify_gradients(seed)?);
    }
    if all || suite == Suite::Noise {
        out.extend(verify_noise(seed)?);
    }
    if all || suite == Suite::Reductions {
        out.extend(verify_reductions(seed)?);
    }
    Ok(out)
}

/// 2000 returns, 20 bins, `lambda = 0.01`, `kappa = r_star - r_90`, 200k draws.
pub fn verify_sampler(seed: u64) -> Result<Vec<OracleReport>> {
    let returns = fixture_returns(2000, seed);
    let stats = crate::data::DatasetStats::from_returns(&returns)?;
    let kappa = stats.max_return - stats.percentile(90)?;
    let mut layout = build_bins_from_returns(&returns, 20)?;
    let probs = bin_probabilities(&layout, 0.01, kappa, stats.max_return)?;
    let reference = oracle_bin_probs(layout.frequencies(), layout.mean_returns(), 0.01, kappa, stats.max_return)?;
    layout.set_probabilities(probs.clone())?;
    let tv = oracle_sampler_tv(&layout, &reference, 200_000, &mut stream(seed, Stream::Sampler, 0))?;
    Ok(vec![
        OracleReport::at_most("bin_probs", "max_relative_error", max_relative_error(&probs, &reference, 0.0), 1e-12),
        OracleReport::at_most("sampler_tv", "total_variation", tv, 0.01),
    ])
}

/// Small-lambda and large-lambda closed forms, plus agreement of the two
/// probability implementations on 100 random layouts.
pub fn verify_limits(seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = stream(seed, Stream::Oracle, 2);
    let (mut zero, mut huge, mut dual) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..100 {
        let n = rng.random_range(5..400usize);
        let bins = rng.random_range(1..=n.min(30));
        let returns: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..150.0)).collect();
        let layout = build_bins_from_returns(&returns, bins)?;
        let r_star = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let kappa = rng.random_range(1.0..80.0);
        let (f, m) = (layout.frequencies(), layout.mean_returns());
        let closed = |weights: Vec<f64>| {
            let s: f64 = weights.iter().sum();
            weights.into_iter().map(|w| w / s).collect::<Vec<_>>()
        };
        let expo: Vec<f64> = m.iter().map(|r| (-(r_star - r).abs() / kappa).exp()).collect();
        zero = zero.max(max_relative_error(&bin_probabilities(&layout, 0.0, kappa, r_star)?, &closed(expo.clone()), 0.0));
        let weighted = closed(f.iter().zip(&expo).map(|(a, b)| a * b).collect());
        huge = huge.max(max_relative_error(&bin_probabilities(&layout, 1e9, kappa, r_star)?, &weighted, 0.0));
        let lambda = [0.0, 0.01, 0.1, 1.0, 10.0][k % 5];
        dual = dual.max(max_relative_error(
            &bin_probabilities(&layout, lambda, kappa, r_star)?,
            &oracle_bin_probs(f, m, lambda, kappa, r_star)?,
            0.0,
        ));
    }
    Ok(vec![
        OracleReport::at_most("lambda_zero_limit", "max_relative_error", zero, 1e-12),
        OracleReport::at_most("lambda_large_limit", "max_relative_error", huge, 1e-6),
        OracleReport::at_most("bin_probs_dual", "max_relative_error", dual, 1e-12),
    ])
}

/// Combined-objective gradients on 20 random nets and batches per reduction.
pub fn verify_gradients(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    for (name, reduction) in [("per_trajectory", Reduction::PerTrajectory), ("flattened", Reduction::Flattened)] {
        let mut worst = 0.0f64;
        for k in 0..20 {
            worst = worst.max(combined_gradient_error(seed.wrapping_mul(1000) + k, reduction)?);
        }
        out.push(OracleReport::at_most(
            &format!("combined_gradient_{name}"),
            "max_relative_error",
            worst,
            1e-4,
        ));
    }
    Ok(out)
}

/// Support and spread of the conservatism noise, 10^6 draws per fixture.
pub fn verify_noise(seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = stream(seed, Stream::Oracle, 3);
    let mut violations = 0usize;
    let mut worst_std = 0.0f64;
    for k in 0..5 {
        let r_star = rng.random_range(1.0..500.0);
        let r_tau = r_star - rng.random_range(0.0..0.3) * r_star;
        let sigma = rng.random_range(0.01..0.5) * r_star;
        let check = oracle_noise_support(r_tau, r_star, sigma, 1_000_000, &mut stream(seed, Stream::Noise, k))?;
        violations += check.violations;
        worst_std = worst_std.max((check.sample_std - sigma).abs() / sigma);
    }
    Ok(vec![
        OracleReport::at_most("noise_support", "violations", violations as f64, 0.0),
        OracleReport::at_most("noise_std", "relative_error", worst_std, 0.02),
    ])
}

/// Regularizer vanishes without qualifying trajectories; `alpha = 0` is plain BC.
pub fn verify_reductions(seed: u64) -> Result<Vec<OracleReport>> {
    let mut inactive_loss = 0.0f64;
    let mut mismatches = 0usize;
    for k in 0..10 {
        let (policy, trajs) = gradient_fixture(seed.wrapping_mul(1000) + 500 + k)?;
        let stats = build_stats(&trajs)?;
        let batch = Batch::new(&trajs);
        let bc = policy.bc_loss(&batch, Reduction::PerTrajectory)?;
        let inactive = ResolvedConservatism {
            percentile_q: 100,
            sigma: 1.0,
            alpha: 1.0,
        };
        let c = policy.combined_objective(
            &batch,
            Some((&inactive, &stats)),
            Reduction::PerTrajectory,
            &mut stream(k, Stream::Noise, 0),
            Mode::Inference,
        )?;
        inactive_loss = inactive_loss.max(c.conservative_loss.abs());
        let off = ResolvedConservatism {
            percentile_q: 0,
            sigma: 1.0,
            alpha: 0.0,
        };
        let z = policy.combined_objective(
            &batch,
            Some((&off, &stats)),
            Reduction::PerTrajectory,
            &mut stream(k, Stream::Noise, 0),
            Mode::Inference,
        )?;
        let same = |a: &[crate::nn::Layer], b: &[crate::nn::Layer]| {
            flatten(a).iter().zip(flatten(b)).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        if !same(&z.grads, &bc.grads) || z.total.to_bits() != bc.total.to_bits() || !same(&c.grads, &bc.grads) {
            mismatches += 1;
        }
    }
    Ok(vec![
        OracleReport::at_most("indicator_zero", "abs_conservative_loss", inactive_loss, 0.0),
        OracleReport::at_most("alpha_zero", "bitwise_mismatches", mismatches as f64, 0.0),
    ])
}
