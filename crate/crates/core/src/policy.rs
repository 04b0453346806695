//! Return-conditioned policy: actions from `(state, average return-to-go)`.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::conservatism::{self, ResolvedConservatism};
use crate::data::{average_rtg, DatasetStats, OfflineDataset, Trajectory};
use crate::error::{Error, Result};
use crate::nn::{DenseNet, Layer, Mode, NetCheckpoint};

/// How squared errors are averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over trajectories of each trajectory's mean over timesteps.
    #[default]
    PerTrajectory,
    /// Mean over every timestep in the batch.
    Flattened,
}

/// Trajectories of one minibatch, optionally restricted to a subset of timesteps.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    items: Vec<(&'a Trajectory, Option<Vec<usize>>)>,
}

impl<'a> Batch<'a> {
    pub fn new(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        Batch {
            items: trajectories.into_iter().map(|t| (t, None)).collect(),
        }
    }

    /// Keeps at most `cap` uniformly chosen timesteps of every trajectory.
    pub fn capped<R: Rng + ?Sized>(
        trajectories: impl IntoIterator<Item = &'a Trajectory>,
        cap: usize,
        rng: &mut R,
    ) -> Self {
        Batch {
            items: trajectories
                .into_iter()
                .map(|t| {
                    if t.len() <= cap {
                        (t, None)
                    } else {
                        let mut idx = sample(rng, t.len(), cap).into_vec();
                        idx.sort_unstable();
                        (t, Some(idx))
                    }
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &'a Trajectory> + '_ {
        self.items.iter().map(|(t, _)| *t)
    }

    fn timesteps(&self, i: usize) -> Vec<usize> {
        match &self.items[i] {
            (_, Some(idx)) => idx.clone(),
            (t, None) => (0..t.len()).collect(),
        }
    }
}

/// Design matrix for a weighted squared-error term.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    /// Nonnegative, summing to one over the segment.
    pub weights: Vec<f64>,
}

impl Rows {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Loss terms and gradient of `Σ_k scale_k · loss_k`.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    /// Unscaled loss of each segment.
    pub losses: Vec<f64>,
    pub total: f64,
    pub grads: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvsPolicy {
    net: DenseNet,
    state_mean: Vec<f64>,
    state_std: Vec<f64>,
    horizon: usize,
}

impl RvsPolicy {
    /// A fresh policy whose state standardization comes from `dataset`.
    pub fn for_dataset<R: Rng + ?Sized>(
        dataset: &OfflineDataset,
        hidden: &[usize],
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![dataset.state_dim() + 1];
        dims.extend_from_slice(hidden);
        dims.push(dataset.action_dim());
        let net = DenseNet::init(&dims, dropout, rng)?;
        let (state_mean, state_std) = dataset.state_moments();
        Self::new(net, state_mean, state_std, dataset.horizon())
    }

    pub fn new(net: DenseNet, state_mean: Vec<f64>, state_std: Vec<f64>, horizon: usize) -> Result<Self> {
        if state_mean.len() + 1 != net.input_dim() || state_std.len() != state_mean.len() {
            return Err(Error::invalid(format!(
                "network input {} must equal state dimension {} + 1",
                net.input_dim(),
                state_mean.len()
            )));
        }
        if state_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("state scales must be positive"));
        }
        if horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        Ok(RvsPolicy {
            net,
            state_mean,
            state_std,
            horizon,
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn write_input(&self, state: &[f64], omega: f64, out: &mut [f64]) {
        let d = self.state_dim();
        for i in 0..d {
            out[i] = (state[i] - self.state_mean[i]) / self.state_std[i];
        }
        out[d] = omega;
    }

    /// Network input for `(state, omega)`: standardized state then raw omega.
    pub fn input_row(&self, state: &[f64], omega: f64) -> Vec<f64> {
        let mut row = vec![0.0; self.state_dim() + 1];
        self.write_input(state, omega, &mut row);
        row
    }

    pub fn predict_action(&self, state: &[f64], omega: f64) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::invalid(format!(
                "state has dimension {}, policy expects {}",
                state.len(),
                self.state_dim()
            )));
        }
        self.net.forward(&self.input_row(state, omega), Mode::Inference)
    }

    /// Rows `(s_t, (g_t + offset) / (H - t + 1)) -> a_t` for the selected batch
    /// entries. `offsets[i]` pairs with `members[i]`.
    pub fn conditioned_rows(
        &self,
        batch: &Batch<'_>,
        members: &[usize],
        offsets: &[f64],
        reduction: Reduction,
    ) -> Result<Rows> {
        if members.len() != offsets.len() {
            return Err(Error::invalid("one offset per batch member is required"));
        }
        let steps: Vec<Vec<usize>> = members.iter().map(|&i| batch.timesteps(i)).collect();
        let total: usize = steps.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::invalid("batch contains no timesteps"));
        }
        let (ds, da) = (self.state_dim(), self.action_dim());
        let mut inputs = Array2::zeros((total, ds + 1));
        let mut targets = Array2::zeros((total, da));
        let mut weights = Vec::with_capacity(total);
        let mut row = 0;
        for ((&i, &offset), ts) in members.iter().zip(offsets).zip(&steps) {
            let traj = batch.items[i].0;
            if traj.state_dim() != ds || traj.action_dim() != da {
                return Err(Error::invalid("trajectory dimensions do not match policy"));
            }
            let w = match reduction {
                Reduction::PerTrajectory => 1.0 / (members.len() * ts.len()) as f64,
                Reduction::Flattened => 1.0 / total as f64,
            };
            for &t in ts {
                let tr = &traj.transitions()[t];
                let omega = average_rtg(traj.rtg()[t] + offset, t + 1, self.horizon)?;
                self.write_input(
                    &tr.state,
                    omega,
                    inputs.row_mut(row).as_slice_mut().expect("standard layout"),
                );
                targets
                    .row_mut(row)
                    .iter_mut()
                    .zip(&tr.action)
                    .for_each(|(d, s)| *d = *s);
                weights.push(w);
                row += 1;
            }
        }
        Ok(Rows {
            inputs,
            targets,
            weights,
        })
    }

    /// Rows for the plain behavioral-cloning term over the whole batch.
    pub fn bc_rows(&self, batch: &Batch<'_>, reduction: Reduction) -> Result<Rows> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let members: Vec<usize> = (0..batch.len()).collect();
        self.conditioned_rows(batch, &members, &vec![0.0; members.len()], reduction)
    }

    /// Loss and gradient of `Σ_k scale_k · loss_k` with one forward/backward
    /// pass over the concatenated segments. Dropout is not applied.
    pub fn objective(&self, segments: &[(&Rows, f64)]) -> Result<ObjectiveValue> {
        self.objective_with_mode(segments, Mode::Inference)
    }

    pub fn objective_with_mode(&self, segments: &[(&Rows, f64)], mode: Mode<'_>) -> Result<ObjectiveValue> {
        let segments: Vec<(&Rows, f64)> = segments.iter().copied().filter(|(r, _)| !r.is_empty()).collect();
        if segments.is_empty() {
            return Err(Error::invalid("objective has no rows"));
        }
        let backward = if segments.len() == 1 {
            let (rows, scale) = segments[0];
            let w: Vec<f64> = if scale == 1.0 {
                rows.weights.clone()
            } else {
                rows.weights.iter().map(|w| w * scale).collect()
            };
            self.net
                .backward_weighted(rows.inputs.view(), rows.targets.view(), &w, mode)?
        } else {
            let x = concatenate(
                Axis(0),
                &segments.iter().map(|(r, _)| r.inputs.view()).collect::<Vec<_>>(),
            )
            .map_err(|e| Error::invalid(e.to_string()))?;
            let y = concatenate(
                Axis(0),
                &segments.iter().map(|(r, _)| r.targets.view()).collect::<Vec<_>>(),
            )
            .map_err(|e| Error::invalid(e.to_string()))?;
            let w: Vec<f64> = segments
                .iter()
                .flat_map(|(r, s)| r.weights.iter().map(move |w| w * s))
                .collect();
            self.net.backward_weighted(x.view(), y.view(), &w, mode)?
        };
        let mut losses = Vec::with_capacity(segments.len());
        let mut offset = 0;
        for (rows, _) in &segments {
            let errs = &backward.row_errors[offset..offset + rows.len()];
            losses.push(errs.iter().zip(&rows.weights).map(|(e, w)| e * w).sum());
            offset += rows.len();
        }
        Ok(ObjectiveValue {
            losses,
            total: backward.loss,
            grads: backward.grads,
        })
    }

    /// Behavioral-cloning loss and gradient on `batch`.
    pub fn bc_loss(&self, batch: &Batch<'_>, reduction: Reduction) -> Result<ObjectiveValue> {
        let rows = self.bc_rows(batch, reduction)?;
        self.objective(&[(&rows, 1.0)])
    }

    /// `L_bc + alpha * C` on one batch, drawing one noise value per qualifying
    /// trajectory. With `conservatism = None` or `alpha = 0` the regularizer
    /// rows are never built and the result is exactly the BC objective.
    pub fn combined_objective(
        &self,
        batch: &Batch<'_>,
        conservatism: Option<(&ResolvedConservatism, &DatasetStats)>,
        reduction: Reduction,
        noise_rng: &mut dyn RngCore,
        mode: Mode<'_>,
    ) -> Result<CombinedValue> {
        let bc = self.bc_rows(batch, reduction)?;
        let cons = match conservatism {
            Some((cfg, stats)) if cfg.alpha != 0.0 => {
                let draws = conservatism::draw_offsets(batch, cfg, stats, noise_rng)?;
                if draws.members.is_empty() {
                    None
                } else {
                    let rows = self.conditioned_rows(batch, &draws.members, &draws.offsets, reduction)?;
                    Some((rows, cfg.alpha))
                }
            }
            _ => None,
        };
        let value = match &cons {
            None => self.objective_with_mode(&[(&bc, 1.0)], mode)?,
            Some((rows, alpha)) => self.objective_with_mode(&[(&bc, 1.0), (rows, *alpha)], mode)?,
        };
        let cons_loss = if cons.is_some() { value.losses[1] } else { 0.0 };
        Ok(CombinedValue {
            bc_loss: value.losses[0],
            conservative_loss: cons_loss,
            total: value.total,
            grads: value.grads,
            qualifying: cons.map(|(r, _)| r.len()).unwrap_or(0),
        })
    }

    pub fn to_checkpoint(&self, fingerprint: Option<String>) -> PolicyCheckpoint {
        PolicyCheckpoint {
            net: self.net.to_checkpoint(fingerprint),
            state_mean: self.state_mean.clone(),
            state_std: self.state_std.clone(),
            horizon: self.horizon,
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
        }
    }

    pub fn from_checkpoint(ckpt: &PolicyCheckpoint) -> Result<Self> {
        let net = DenseNet::from_checkpoint(&ckpt.net)?;
        if ckpt.state_dim != ckpt.state_mean.len() || ckpt.action_dim != net.output_dim() {
            return Err(Error::parse("checkpoint", "declared dimensions do not match network"));
        }
        if ckpt.state_mean.iter().chain(&ckpt.state_std).any(|v| !v.is_finite()) {
            return Err(Error::parse("checkpoint", "non-finite standardization value"));
        }
        RvsPolicy::new(net, ckpt.state_mean.clone(), ckpt.state_std.clone(), ckpt.horizon)
            .map_err(|e| Error::parse("checkpoint", e.to_string()))
    }

    pub fn to_json(&self, fingerprint: Option<String>) -> String {
        serde_json::to_string(&self.to_checkpoint(fingerprint)).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: PolicyCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", e.to_string()))?;
        Self::from_checkpoint(&ckpt)
    }
}

#[derive(Debug, Clone)]
pub struct CombinedValue {
    pub bc_loss: f64,
    /// Unscaled regularizer value (0 when no trajectory qualified).
    pub conservative_loss: f64,
    pub total: f64,
    pub grads: Vec<Layer>,
    /// Number of regularizer rows in the objective.
    pub qualifying: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub net: NetCheckpoint,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}
