//! Trajectories, return-to-go bookkeeping and dataset order statistics.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// An episode with its return-to-go sequence computed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    transitions: Vec<Transition>,
    rtg: Vec<f64>,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>) -> Result<Self> {
        let first = transitions
            .first()
            .ok_or_else(|| Error::invalid("trajectory must contain at least one transition"))?;
        let (ds, da) = (first.state.len(), first.action.len());
        for (t, tr) in transitions.iter().enumerate() {
            if tr.state.len() != ds || tr.action.len() != da {
                return Err(Error::invalid(format!(
                    "transition {t}: dimension changed within trajectory"
                )));
            }
            if !tr.reward.is_finite()
                || tr.state.iter().any(|x| !x.is_finite())
                || tr.action.iter().any(|x| !x.is_finite())
            {
                return Err(Error::invalid(format!("transition {t}: non-finite value")));
            }
        }
        let rewards: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
        let rtg = compute_rtg(&rewards)?;
        Ok(Trajectory { transitions, rtg })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn rtg(&self) -> &[f64] {
        &self.rtg
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Undiscounted return, equal to the first return-to-go.
    pub fn total_return(&self) -> f64 {
        self.rtg[0]
    }

    pub fn state_dim(&self) -> usize {
        self.transitions[0].state.len()
    }

    pub fn action_dim(&self) -> usize {
        self.transitions[0].action.len()
    }
}

/// Suffix sums of `rewards`: `out[t] = rewards[t] + ... + rewards[last]`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::invalid("reward sequence is empty"));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::invalid(format!("reward {i} is not finite")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

/// Average return-to-go `g / (H - t + 1)` for a 1-based timestep `t`.
pub fn average_rtg(g: f64, t: usize, horizon: usize) -> Result<f64> {
    if t == 0 || t > horizon {
        return Err(Error::invalid(format!(
            "timestep {t} outside 1..={horizon}"
        )));
    }
    Ok(g / (horizon - t + 1) as f64)
}

/// 1-based nearest rank `ceil(q/100 * n)` clamped to `[1, n]`.
fn nearest_rank(n: usize, q: u8) -> usize {
    let rank = (q as usize * n).div_ceil(100);
    rank.clamp(1, n)
}

/// Nearest-rank percentile of `values`; `q = 0` yields the minimum.
pub fn percentile(values: &[f64], q: u8) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty sequence"));
    }
    if q > 100 {
        return Err(Error::invalid(format!("percentile {q} outside 0..=100")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(sorted.len(), q) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub max_return: f64,
    pub min_return: f64,
    pub percentiles: BTreeMap<u8, f64>,
    pub count: usize,
}

impl DatasetStats {
    pub fn from_returns(returns: &[f64]) -> Result<Self> {
        if returns.is_empty() {
            return Err(Error::invalid("cannot build statistics of an empty dataset"));
        }
        let mut sorted = returns.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let percentiles = (0..=100u8)
            .map(|q| (q, sorted[nearest_rank(n, q) - 1]))
            .collect();
        Ok(DatasetStats {
            max_return: sorted[n - 1],
            min_return: sorted[0],
            percentiles,
            count: n,
        })
    }

    /// `r_q`, the q-th nearest-rank percentile of trajectory returns.
    pub fn percentile(&self, q: u8) -> Result<f64> {
        self.percentiles
            .get(&q)
            .copied()
            .ok_or_else(|| Error::invalid(format!("percentile {q} outside 0..=100")))
    }
}

/// An immutable collection of trajectories sharing dimensions and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    trajectories: Vec<Trajectory>,
    stats: DatasetStats,
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
}

impl OfflineDataset {
    pub fn new(trajectories: Vec<Trajectory>, horizon: usize) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::invalid("dataset contains no trajectories"))?;
        if horizon == 0 {
            return Err(Error::invalid("horizon must be positive"));
        }
        let (state_dim, action_dim) = (first.state_dim(), first.action_dim());
        for (i, tr) in trajectories.iter().enumerate() {
            if tr.state_dim() != state_dim || tr.action_dim() != action_dim {
                return Err(Error::invalid(format!(
                    "trajectory {i}: dimensions differ from trajectory 0"
                )));
            }
            if tr.len() > horizon {
                return Err(Error::invalid(format!(
                    "trajectory {i}: length {} exceeds horizon {horizon}",
                    tr.len()
                )));
            }
        }
        let stats = build_stats(&trajectories)?;
        Ok(OfflineDataset {
            trajectories,
            stats,
            horizon,
            state_dim,
            action_dim,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn stats(&self) -> &DatasetStats {
        &self.stats
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::total_return).collect()
    }

    /// Per-coordinate mean and standard deviation over every stored state.
    /// Coordinates with (near) zero spread get a unit scale.
    pub fn state_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.state_dim;
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        for tr in self.trajectories.iter().flat_map(|t| t.transitions()) {
            for (s, x) in sum.iter_mut().zip(&tr.state) {
                *s += x;
            }
            count += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; d];
        for tr in self.trajectories.iter().flat_map(|t| t.transitions()) {
            for ((v, x), m) in var.iter_mut().zip(&tr.state).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    }

    /// Serializes to the JSON-lines format. Return-to-go is not written.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = Header {
            version: FORMAT_VERSION,
            horizon: self.horizon,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for tr in &self.trajectories {
            let rec = TrajectoryRecord {
                states: tr.transitions.iter().map(|t| t.state.clone()).collect(),
                actions: tr.transitions.iter().map(|t| t.action.clone()).collect(),
                rewards: tr.transitions.iter().map(|t| t.reward).collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("trajectory serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_jsonl_str(text: &str) -> Result<Self> {
        Self::read_jsonl(text.as_bytes())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
            Ok(s) => !s.trim().is_empty(),
            Err(_) => true,
        });
        let (_, header_line) = lines
            .next()
            .ok_or_else(|| Error::parse("line 1", "missing header"))?;
        let header_line = header_line.map_err(|e| Error::parse("line 1", e.to_string()))?;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::parse("line 1", e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::parse(
                "line 1",
                format!("unsupported version {}", header.version),
            ));
        }
        if header.horizon == 0 || header.state_dim == 0 || header.action_dim == 0 {
            return Err(Error::parse("line 1", "horizon and dimensions must be positive"));
        }
        let mut trajectories = Vec::new();
        for (idx, line) in lines {
            let loc = format!("line {}", idx + 1);
            let line = line.map_err(|e| Error::parse(&loc, e.to_string()))?;
            let rec: TrajectoryRecord =
                serde_json::from_str(&line).map_err(|e| Error::parse(&loc, e.to_string()))?;
            let n = rec.rewards.len();
            if rec.states.len() != n || rec.actions.len() != n {
                return Err(Error::parse(&loc, "states, actions and rewards differ in length"));
            }
            if n > header.horizon {
                return Err(Error::parse(&loc, "trajectory longer than horizon"));
            }
            let mut transitions = Vec::with_capacity(n);
            for ((state, action), reward) in rec.states.into_iter().zip(rec.actions).zip(rec.rewards)
            {
                if state.len() != header.state_dim || action.len() != header.action_dim {
                    return Err(Error::parse(&loc, "dimension does not match header"));
                }
                transitions.push(Transition {
                    state,
                    action,
                    reward,
                });
            }
            let tr = Trajectory::new(transitions).map_err(|e| Error::parse(&loc, e.to_string()))?;
            trajectories.push(tr);
        }
        OfflineDataset::new(trajectories, header.horizon)
            .map_err(|e| Error::parse("dataset", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

/// Return statistics of a set of trajectories.
pub fn build_stats(trajectories: &[Trajectory]) -> Result<DatasetStats> {
    let returns: Vec<f64> = trajectories.iter().map(Trajectory::total_return).collect();
    DatasetStats::from_returns(&returns)
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRecord {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
}
