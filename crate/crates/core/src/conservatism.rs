//! Conservative regularization through positive return-to-go perturbation.
//!
//! For a trajectory whose return exceeds the `q`-th percentile, one scalar
//! `eps ~ Uniform[r_star - r_tau, r_star - r_tau + sqrt(12) * sigma]` is added to
//! every return-to-go, so the perturbed initial return is at least `r_star`
//! and the noise has standard deviation `sigma`. The regularizer is the
//! squared error between the dataset actions and the actions predicted under
//! the perturbed conditioning.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::DatasetStats;
use crate::error::{Error, Result};
use crate::policy::{Batch, Reduction, RvsPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConservatismConfig {
    pub percentile_q: u8,
    /// Noise standard deviation in return units. `None` derives it from the
    /// dataset as `r_star - r_50`.
    pub noise_std: Option<f64>,
    pub alpha: f64,
}

impl Default for ConservatismConfig {
    fn default() -> Self {
        ConservatismConfig {
            percentile_q: 95,
            noise_std: None,
            alpha: 1.0,
        }
    }
}

/// Conservatism parameters with a concrete noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConservatism {
    pub percentile_q: u8,
    pub sigma: f64,
    pub alpha: f64,
}

impl ConservatismConfig {
    pub fn validate(&self) -> Result<()> {
        if self.percentile_q > 100 {
            return Err(Error::invalid("conservative percentile must be in 0..=100"));
        }
        if let Some(s) = self.noise_std {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::invalid("noise standard deviation must be positive"));
            }
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be a finite nonnegative number"));
        }
        Ok(())
    }

    /// Fixes sigma, using `stats` for the dataset-derived default.
    pub fn resolve(&self, stats: &DatasetStats) -> Result<ResolvedConservatism> {
        self.validate()?;
        let sigma = match self.noise_std {
            Some(s) => s,
            None => default_sigma(stats),
        };
        Ok(ResolvedConservatism {
            percentile_q: self.percentile_q,
            sigma,
            alpha: self.alpha,
        })
    }
}

/// `r_star - r_50`, floored away from zero for constant-return data.
pub fn default_sigma(stats: &DatasetStats) -> f64 {
    let gap = stats.max_return - stats.percentile(50).expect("table covers 0..=100");
    gap.max(crate::weighting::kappa_floor(stats.max_return))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBounds {
    pub lower: f64,
    pub upper: f64,
}

/// Support of the noise for a trajectory with return `r_tau`.
///
/// The endpoints are adjusted by at most a few ulps so that, in floating
/// point, `r_tau + lower >= r_star` and `r_tau + upper <= r_star + sqrt(12) * sigma`.
pub fn noise_bounds(r_tau: f64, r_star: f64, sigma: f64) -> Result<NoiseBounds> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("noise standard deviation must be positive"));
    }
    if !r_tau.is_finite() || !r_star.is_finite() {
        return Err(Error::invalid("returns must be finite"));
    }
    let width = (12.0 * sigma * sigma).sqrt();
    let mut lower = r_star - r_tau;
    while r_tau + lower < r_star {
        lower = lower.next_up();
    }
    let mut upper = lower + width;
    let ceiling = r_star + width;
    while r_tau + upper > ceiling && upper > lower {
        upper = upper.next_down();
    }
    Ok(NoiseBounds { lower, upper })
}

pub fn sample_noise<R: Rng + ?Sized>(bounds: NoiseBounds, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    (bounds.lower + (bounds.upper - bounds.lower) * u).clamp(bounds.lower, bounds.upper)
}

/// `rtg[t] + eps` for every timestep.
pub fn perturb_rtgs(rtg: &[f64], eps: f64) -> Vec<f64> {
    rtg.iter().map(|g| g + eps).collect()
}

/// Noise offsets for the qualifying members of one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseDraws {
    /// Batch positions with `r_tau > r_q`.
    pub members: Vec<usize>,
    pub offsets: Vec<f64>,
}

/// One fresh draw per qualifying trajectory, in batch order.
pub fn draw_offsets(
    batch: &Batch<'_>,
    cfg: &ResolvedConservatism,
    stats: &DatasetStats,
    rng: &mut dyn RngCore,
) -> Result<NoiseDraws> {
    let threshold = stats.percentile(cfg.percentile_q)?;
    let mut draws = NoiseDraws::default();
    for (i, traj) in batch.trajectories().enumerate() {
        let r_tau = traj.total_return();
        if r_tau > threshold {
            let bounds = noise_bounds(r_tau, stats.max_return, cfg.sigma)?;
            draws.members.push(i);
            draws.offsets.push(sample_noise(bounds, rng));
        }
    }
    Ok(draws)
}

/// Value of the regularizer on `batch` for fresh noise draws; zero when no
/// trajectory exceeds the percentile threshold.
pub fn conservative_loss(
    policy: &RvsPolicy,
    batch: &Batch<'_>,
    cfg: &ResolvedConservatism,
    stats: &DatasetStats,
    reduction: Reduction,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let draws = draw_offsets(batch, cfg, stats, rng)?;
    conservative_loss_with_offsets(policy, batch, &draws, reduction)
}

/// Regularizer value for fixed noise draws.
pub fn conservative_loss_with_offsets(
    policy: &RvsPolicy,
    batch: &Batch<'_>,
    draws: &NoiseDraws,
    reduction: Reduction,
) -> Result<f64> {
    if draws.members.is_empty() {
        return Ok(0.0);
    }
    let rows = policy.conditioned_rows(batch, &draws.members, &draws.offsets, reduction)?;
    Ok(policy.objective(&[(&rows, 1.0)])?.losses[0])
}
