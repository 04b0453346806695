//! Return-binned trajectory weighting and the hard top-fraction filter.
//!
//! Trajectories are sorted by return and split into `B` contiguous bins of
//! (almost) equal size. A bin is drawn with probability proportional to
//!
//! ```text
//! f(b) / (f(b) + lambda) * exp(-|mean_return(b) - r_star| / kappa)
//! ```
//!
//! where `f(b) = |b| / N`, and a trajectory is then drawn uniformly inside it.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetStats, OfflineDataset};
use crate::error::{Error, Result};

/// How the temperature `kappa` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaSpec {
    Explicit(f64),
    /// `kappa = r_star - r_z` for percentile `z`.
    PercentileGap(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightingConfig {
    pub num_bins: usize,
    pub lambda: f64,
    pub kappa: KappaSpec,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        WeightingConfig {
            num_bins: 20,
            lambda: 0.01,
            kappa: KappaSpec::PercentileGap(90),
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins == 0 {
            return Err(Error::invalid("number of bins must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be a finite nonnegative number"));
        }
        match self.kappa {
            KappaSpec::Explicit(k) if !(k > 0.0) => {
                Err(Error::invalid("explicit kappa must be positive"))
            }
            KappaSpec::PercentileGap(z) if z > 100 => {
                Err(Error::invalid("kappa percentile must be in 0..=100"))
            }
            _ => Ok(()),
        }
    }

    /// Bins the dataset and attaches sampling probabilities.
    pub fn layout(&self, dataset: &OfflineDataset) -> Result<BinLayout> {
        self.validate()?;
        let mut layout = build_bins(dataset, self.num_bins)?;
        let kappa = resolve_kappa(dataset.stats(), self.kappa);
        let probs = bin_probabilities(&layout, self.lambda, kappa, dataset.stats().max_return)?;
        layout.set_probabilities(probs)?;
        Ok(layout)
    }
}

/// Return-sorted bins over trajectory indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BinLayout {
    bins: Vec<Vec<usize>>,
    mean_returns: Vec<f64>,
    frequencies: Vec<f64>,
    probabilities: Option<Vec<f64>>,
    sampler: Option<WeightedIndex<f64>>,
}

impl BinLayout {
    pub fn bins(&self) -> &[Vec<usize>] {
        &self.bins
    }

    pub fn mean_returns(&self) -> &[f64] {
        &self.mean_returns
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn probabilities(&self) -> Option<&[f64]> {
        self.probabilities.as_deref()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn set_probabilities(&mut self, probs: Vec<f64>) -> Result<()> {
        if probs.len() != self.bins.len() {
            return Err(Error::invalid("probability count differs from bin count"));
        }
        let sampler = WeightedIndex::new(&probs)
            .map_err(|e| Error::invalid(format!("bin probabilities unusable: {e}")))?;
        self.probabilities = Some(probs);
        self.sampler = Some(sampler);
        Ok(())
    }

    /// Draws a bin index. With a single bin no randomness is consumed.
    pub fn sample_bin<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let sampler = self
            .sampler
            .as_ref()
            .expect("bin probabilities must be set before sampling");
        if self.bins.len() == 1 {
            0
        } else {
            sampler.sample(rng)
        }
    }

    /// Two-stage draw: a bin by probability, then a member uniformly.
    pub fn sample_trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let bin = &self.bins[self.sample_bin(rng)];
        bin[rng.random_range(0..bin.len())]
    }
}

pub fn build_bins(dataset: &OfflineDataset, num_bins: usize) -> Result<BinLayout> {
    build_bins_from_returns(&dataset.returns(), num_bins)
}

/// Stable return sort, then contiguous split. When `N mod B = k`, the `k`
/// lowest-return bins hold one extra trajectory.
pub fn build_bins_from_returns(returns: &[f64], num_bins: usize) -> Result<BinLayout> {
    let n = returns.len();
    if n == 0 {
        return Err(Error::invalid("cannot bin an empty dataset"));
    }
    if num_bins == 0 || num_bins > n {
        return Err(Error::invalid(format!(
            "bin count {num_bins} must be in 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| returns[a].total_cmp(&returns[b]));

    let base = n / num_bins;
    let extra = n % num_bins;
    let mut bins = Vec::with_capacity(num_bins);
    let mut start = 0;
    for b in 0..num_bins {
        let size = base + usize::from(b < extra);
        bins.push(order[start..start + size].to_vec());
        start += size;
    }
    let mean_returns = bins
        .iter()
        .map(|bin| bin.iter().map(|&i| returns[i]).sum::<f64>() / bin.len() as f64)
        .collect();
    let frequencies = bins.iter().map(|bin| bin.len() as f64 / n as f64).collect();
    Ok(BinLayout {
        bins,
        mean_returns,
        frequencies,
        probabilities: None,
        sampler: None,
    })
}

/// Normalized bin sampling probabilities for the given smoothing parameters.
pub fn bin_probabilities(layout: &BinLayout, lambda: f64, kappa: f64, r_star: f64) -> Result<Vec<f64>> {
    if !(kappa > 0.0) {
        return Err(Error::invalid("kappa must be positive"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    // Gaps are measured from the closest bin; the shift cancels on normalization.
    let closest = layout
        .mean_returns
        .iter()
        .map(|r| (r - r_star).abs())
        .fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = layout
        .frequencies
        .iter()
        .zip(&layout.mean_returns)
        .map(|(&f, &r)| f / (f + lambda) * (-((r - r_star).abs() - closest) / kappa).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid(
            "all bin weights underflowed; kappa is too small for this return range",
        ));
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Smallest admissible temperature for a percentile-gap rule.
pub fn kappa_floor(r_star: f64) -> f64 {
    1e-6 * r_star.abs().max(1.0)
}

pub fn resolve_kappa(stats: &DatasetStats, spec: KappaSpec) -> f64 {
    match spec {
        KappaSpec::Explicit(k) => k,
        KappaSpec::PercentileGap(z) => {
            let r_z = stats.percentile(z.min(100)).expect("table covers 0..=100");
            (stats.max_return - r_z).max(kappa_floor(stats.max_return))
        }
    }
}

/// Unnormalized continuous-form weight of a return `r` whose density is `density`.
pub fn density_weight(r: f64, density: f64, lambda: f64, kappa: f64, r_star: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::invalid("kappa must be positive"));
    }
    if !(density >= 0.0) {
        return Err(Error::invalid("density must be nonnegative"));
    }
    if density == 0.0 {
        return Ok(0.0);
    }
    Ok(density / (density + lambda) * (-(r - r_star).abs() / kappa).exp())
}

/// Keeps the `ceil(p * N)` highest-return trajectories in their original order.
pub fn filter_top_fraction(dataset: &OfflineDataset, p: f64) -> Result<OfflineDataset> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("filter fraction {p} outside (0, 1]")));
    }
    let n = dataset.len();
    let keep = top_count(n, p);
    let returns = dataset.returns();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    let trajs = kept
        .into_iter()
        .map(|i| dataset.trajectories()[i].clone())
        .collect();
    OfflineDataset::new(trajs, dataset.horizon())
}

/// `ceil(p * n)`, tolerant of the representation error in `p`.
fn top_count(n: usize, p: f64) -> usize {
    let raw = p * n as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 * raw.max(1.0) {
        rounded
    } else {
        raw.ceil()
    };
    (k as usize).clamp(1, n)
}
