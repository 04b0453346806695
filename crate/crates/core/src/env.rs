//! Synthetic fixed-horizon reaching tasks and behavior-policy datasets.
//!
//! The state lives in a box `[low, high]^d`, actions in `[-1, 1]^d`, and a
//! step moves the state by `step_size * action` plus Gaussian noise. The
//! reward after each step is `1 - ‖next - goal‖ / diameter` where the
//! diameter is the longest distance inside the box.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{OfflineDataset, Trajectory, Transition};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardRule {
    #[default]
    GoalDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub goal: Vec<f64>,
    pub start: Vec<f64>,
    pub step_size: f64,
    pub noise_std: f64,
    /// Half-width of the uniform box around `start` that initial states are drawn from.
    #[serde(default)]
    pub start_spread: f64,
    pub low: f64,
    pub high: f64,
    #[serde(default)]
    pub reward: RewardRule,
}

impl EnvSpec {
    /// One-dimensional reaching task.
    pub fn lineworld() -> EnvSpec {
        EnvSpec {
            name: "lineworld".into(),
            state_dim: 1,
            action_dim: 1,
            horizon: 20,
            goal: vec![0.4],
            start: vec![-0.8],
            step_size: 0.15,
            noise_std: 0.02,
            start_spread: 0.0,
            low: -1.0,
            high: 1.0,
            reward: RewardRule::GoalDistance,
        }
    }

    /// Two-dimensional reaching task.
    pub fn planeworld() -> EnvSpec {
        EnvSpec {
            name: "planeworld".into(),
            state_dim: 2,
            action_dim: 2,
            horizon: 20,
            goal: vec![0.4, 0.3],
            start: vec![-0.8, -0.7],
            step_size: 0.15,
            noise_std: 0.02,
            start_spread: 0.0,
            low: -1.0,
            high: 1.0,
            reward: RewardRule::GoalDistance,
        }
    }

    pub fn builtin(name: &str) -> Option<EnvSpec> {
        match name {
            "lineworld" => Some(Self::lineworld()),
            "planeworld" => Some(Self::planeworld()),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<EnvSpec> {
        let spec: EnvSpec = toml::from_str(text).map_err(|e| Error::parse("env spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("env spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::invalid("horizon and dimensions must be at least 1"));
        }
        if self.action_dim != self.state_dim {
            return Err(Error::invalid("reaching dynamics need action_dim == state_dim"));
        }
        if self.goal.len() != self.state_dim || self.start.len() != self.state_dim {
            return Err(Error::invalid("goal and start must have state_dim entries"));
        }
        if !(self.low < self.high) || !self.low.is_finite() || !self.high.is_finite() {
            return Err(Error::invalid("state bounds must satisfy low < high"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("step size must be positive"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise std must be nonnegative"));
        }
        if !(self.start_spread >= 0.0) || !self.start_spread.is_finite() {
            return Err(Error::invalid("start spread must be nonnegative"));
        }
        if self
            .goal
            .iter()
            .chain(&self.start)
            .any(|x| !(self.low..=self.high).contains(x))
        {
            return Err(Error::invalid("goal and start must lie inside the state bounds"));
        }
        Ok(())
    }

    pub fn diameter(&self) -> f64 {
        (self.high - self.low) * (self.state_dim as f64).sqrt()
    }

    /// Initial state. Without spread no randomness is consumed.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        if self.start_spread == 0.0 {
            return self.start.clone();
        }
        self.start
            .iter()
            .map(|s| (s + rng.random_range(-self.start_spread..=self.start_spread)).clamp(self.low, self.high))
            .collect()
    }

    /// Reward of arriving at `state`.
    pub fn reward(&self, state: &[f64]) -> f64 {
        match self.reward {
            RewardRule::GoalDistance => {
                let dist = state
                    .iter()
                    .zip(&self.goal)
                    .map(|(s, g)| (s - g) * (s - g))
                    .sum::<f64>()
                    .sqrt();
                1.0 - dist / self.diameter()
            }
        }
    }
}

/// Applies a (clamped) action. Zero-noise specs consume no randomness.
pub fn step<R: Rng + ?Sized>(spec: &EnvSpec, state: &[f64], action: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let next: Vec<f64> = state
        .iter()
        .zip(action)
        .map(|(s, a)| {
            let mut x = s + spec.step_size * a.clamp(-1.0, 1.0);
            if spec.noise_std > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                x += spec.noise_std * z;
            }
            x.clamp(spec.low, spec.high)
        })
        .collect();
    let reward = spec.reward(&next);
    (next, reward)
}

/// With probability `quality` the action that moves straight to the goal
/// (clamped to the action box), otherwise a uniform random action.
pub fn behavior_action<R: Rng + ?Sized>(
    quality: f64,
    state: &[f64],
    goal: &[f64],
    step_size: f64,
    rng: &mut R,
) -> Vec<f64> {
    if rng.random::<f64>() < quality {
        state
            .iter()
            .zip(goal)
            .map(|(s, g)| ((g - s) / step_size).clamp(-1.0, 1.0))
            .collect()
    } else {
        (0..state.len()).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
}

/// One full-horizon episode of the behavior policy.
pub fn behavior_episode<R: Rng + ?Sized>(spec: &EnvSpec, quality: f64, rng: &mut R) -> Result<Trajectory> {
    let mut state = spec.reset(rng);
    let mut transitions = Vec::with_capacity(spec.horizon);
    for _ in 0..spec.horizon {
        let action = behavior_action(quality, &state, &spec.goal, spec.step_size, rng);
        let (next, reward) = step(spec, &state, &action, rng);
        transitions.push(Transition {
            state: std::mem::replace(&mut state, next),
            action,
            reward,
        });
    }
    Trajectory::new(transitions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub env: EnvSpec,
    /// `(behavior quality, trajectory count)` groups, generated in order.
    pub mixture: Vec<(f64, usize)>,
    pub seed: u64,
}

pub const RECIPES: [&str; 3] = ["medium", "med-replay", "med-expert"];

impl DatasetRecipe {
    /// Named mixture with `n` trajectories in total.
    pub fn named(name: &str, env: EnvSpec, n: usize, seed: u64) -> Result<DatasetRecipe> {
        let split = |parts: &[f64]| -> Vec<(f64, usize)> {
            let k = parts.len();
            parts
                .iter()
                .enumerate()
                .map(|(i, &p)| (p, n / k + usize::from(i < n % k)))
                .filter(|&(_, c)| c > 0)
                .collect()
        };
        let mixture = match name {
            "medium" => split(&[0.4]),
            "med-replay" => split(&[0.1, 0.2, 0.3, 0.4, 0.5]),
            "med-expert" => split(&[0.4, 1.0]),
            other => {
                return Err(Error::invalid(format!(
                    "unknown recipe {other:?}; expected one of {RECIPES:?}"
                )))
            }
        };
        let recipe = DatasetRecipe { env, mixture, seed };
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.mixture.is_empty() {
            return Err(Error::invalid("mixture is empty"));
        }
        for &(p, c) in &self.mixture {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("behavior quality {p} outside [0, 1]")));
            }
            if c == 0 {
                return Err(Error::invalid("mixture counts must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Rolls out the mixture; trajectory `i` uses its own stream derived from `(seed, i)`.
pub fn generate_dataset(recipe: &DatasetRecipe) -> Result<OfflineDataset> {
    recipe.validate()?;
    let mut trajectories = Vec::new();
    let mut index = 0u64;
    for &(quality, count) in &recipe.mixture {
        for _ in 0..count {
            let mut rng = stream(recipe.seed, Stream::DataGen, index);
            trajectories.push(behavior_episode(&recipe.env, quality, &mut rng)?);
            index += 1;
        }
    }
    OfflineDataset::new(trajectories, recipe.env.horizon)
}

/// Mean behavior return over `episodes` rollouts.
pub fn mean_behavior_return(spec: &EnvSpec, quality: f64, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::invalid("episodes must be at least 1"));
    }
    let tag = (quality * 1e6).round() as u64;
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = stream(seed, Stream::Reference, (tag << 24) ^ e as u64);
        total += behavior_episode(spec, quality, &mut rng)?.total_return();
    }
    Ok(total / episodes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub random: f64,
    pub expert: f64,
}

/// Mean returns of the uniform-random (`p = 0`) and goal-directed (`p = 1`) behaviors.
pub fn reference_returns(spec: &EnvSpec, episodes: usize, seed: u64) -> Result<ReferenceReturns> {
    Ok(ReferenceReturns {
        random: mean_behavior_return(spec, 0.0, episodes, seed)?,
        expert: mean_behavior_return(spec, 1.0, episodes, seed)?,
    })
}
