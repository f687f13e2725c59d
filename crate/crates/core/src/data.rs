//! Trajectories, return-to-go, return scaling and binning, observation
//! normalization, training-window sampling and the JSONL dataset format.

use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionKind, ActionSpace, EnvSpec, PolicySpec};
use crate::{ConfigError, Error};

pub const STD_FLOOR: f32 = 1e-6;

/// Inclusive return-to-go: `rtg[t] = sum_{k >= t} rewards[k]`.
pub fn compute_rtg(rewards: &[f32]) -> Vec<f32> {
    let mut rtg = vec![0.0f32; rewards.len()];
    let mut acc = 0.0f32;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        rtg[t] = acc;
    }
    rtg
}

/// One episode. `observations` and `returns_to_go` carry one more entry than
/// there are steps (the final observation, and a trailing zero).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Vec<f32>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f32>,
    pub returns_to_go: Vec<f32>,
}

impl Trajectory {
    pub fn new(observations: Vec<Vec<f32>>, actions: Vec<Action>, rewards: Vec<f32>) -> Result<Self, ConfigError> {
        if actions.len() != rewards.len() || observations.len() != rewards.len() + 1 {
            return Err(ConfigError::invalid(
                "trajectory",
                format!(
                    "inconsistent lengths: {} observations, {} actions, {} rewards",
                    observations.len(),
                    actions.len(),
                    rewards.len()
                ),
            ));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(ConfigError::invalid("trajectory.rew", "rewards must be finite"));
        }
        let mut returns_to_go = compute_rtg(&rewards);
        returns_to_go.push(0.0);
        Ok(Self {
            observations,
            actions,
            rewards,
            returns_to_go,
        })
    }

    pub fn steps(&self) -> usize {
        self.rewards.len()
    }

    pub fn episode_return(&self) -> f32 {
        self.returns_to_go[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub env: EnvSpec,
    pub seed: u64,
    pub policy: PolicySpec,
    pub action_kind: ActionKind,
}

/// Normalization and scaling statistics derived from a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataStats {
    pub obs_mean: Vec<f32>,
    pub obs_std: Vec<f32>,
    pub return_min: f32,
    pub return_max: f32,
}

impl DataStats {
    pub fn normalize_obs(&self, obs: &[f32]) -> Vec<f32> {
        obs.iter()
            .zip(&self.obs_mean)
            .zip(&self.obs_std)
            .map(|((&x, &m), &s)| (x - m) / s)
            .collect()
    }

    pub fn denormalize_obs(&self, obs: &[f32]) -> Vec<f32> {
        obs.iter()
            .zip(&self.obs_mean)
            .zip(&self.obs_std)
            .map(|((&x, &m), &s)| x * s + m)
            .collect()
    }

    /// Raw return to `[0, 1]` scale (values outside the dataset range map
    /// outside `[0, 1]`; the tokenizer clamps).
    pub fn scale_return(&self, r: f32) -> f32 {
        let range = (self.return_max - self.return_min).max(STD_FLOOR);
        (r - self.return_min) / range
    }

    pub fn unscale_return(&self, s: f32) -> f32 {
        let range = (self.return_max - self.return_min).max(STD_FLOOR);
        s * range + self.return_min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub action_space: ActionSpace,
    pub trajectories: Vec<Trajectory>,
    pub obs_mean: Vec<f32>,
    pub obs_std: Vec<f32>,
    pub return_min: f32,
    pub return_max: f32,
}

impl Dataset {
    /// Builds a dataset and fits its statistics.
    pub fn new(meta: DatasetMeta, action_space: ActionSpace, trajectories: Vec<Trajectory>) -> Result<Self, ConfigError> {
        if trajectories.is_empty() {
            return Err(ConfigError::invalid("dataset", "no trajectories"));
        }
        let obs_dim = trajectories[0].observations[0].len();
        for t in &trajectories {
            if t.observations.iter().any(|o| o.len() != obs_dim) {
                return Err(ConfigError::invalid("dataset.obs", "observation widths differ"));
            }
            if !t.actions.iter().all(|a| action_space.contains(a)) {
                return Err(ConfigError::invalid("dataset.act", "action outside the action space"));
            }
        }
        let mut ds = Self {
            meta,
            action_space,
            trajectories,
            obs_mean: Vec::new(),
            obs_std: Vec::new(),
            return_min: 0.0,
            return_max: 0.0,
        };
        ds.fit_normalization();
        let returns = ds.trajectories.iter().map(Trajectory::episode_return);
        ds.return_min = returns.clone().fold(f32::INFINITY, f32::min);
        ds.return_max = returns.fold(f32::NEG_INFINITY, f32::max);
        Ok(ds)
    }

    pub fn obs_dim(&self) -> usize {
        self.trajectories[0].observations[0].len()
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::steps).sum()
    }

    /// Population mean and standard deviation per observation dimension over
    /// every stored observation; std is floored at [`STD_FLOOR`].
    pub fn fit_normalization(&mut self) {
        let d = self.obs_dim();
        let mut sum = vec![0.0f64; d];
        let mut count = 0usize;
        for o in self.trajectories.iter().flat_map(|t| &t.observations) {
            for (s, &x) in sum.iter_mut().zip(o) {
                *s += x as f64;
            }
            count += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; d];
        for o in self.trajectories.iter().flat_map(|t| &t.observations) {
            for ((s, &x), m) in sq.iter_mut().zip(o).zip(&mean) {
                *s += (x as f64 - m).powi(2);
            }
        }
        self.obs_mean = mean.iter().map(|&m| m as f32).collect();
        self.obs_std = sq
            .iter()
            .map(|s| ((s / count as f64).sqrt() as f32).max(STD_FLOOR))
            .collect();
    }

    pub fn stats(&self) -> DataStats {
        DataStats {
            obs_mean: self.obs_mean.clone(),
            obs_std: self.obs_std.clone(),
            return_min: self.return_min,
            return_max: self.return_max,
        }
    }

    /// Clips every reward to `[-1, 1]` and recomputes returns and their
    /// bounds.
    pub fn clip_rewards(self) -> Self {
        let trajectories = self
            .trajectories
            .into_iter()
            .map(|t| {
                let rewards = t.rewards.iter().map(|r| r.clamp(-1.0, 1.0)).collect();
                Trajectory::new(t.observations, t.actions, rewards).expect("clipping keeps lengths and finiteness")
            })
            .collect();
        Self::new(self.meta, self.action_space, trajectories).expect("clipping keeps the dataset valid")
    }

    /// Replaces the return bounds, e.g. with externally known task limits.
    pub fn with_return_bounds(mut self, min: f32, max: f32) -> Result<Self, ConfigError> {
        if !(min <= max) {
            return Err(ConfigError::invalid("return_bounds", "min must not exceed max"));
        }
        self.return_min = min;
        self.return_max = max;
        Ok(self)
    }
}

/// Equal-width bins over a scaled return range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReturnTokenizer {
    pub n_bins: usize,
    pub return_min: f32,
    pub return_max: f32,
}

impl Default for ReturnTokenizer {
    fn default() -> Self {
        Self {
            n_bins: 60,
            return_min: 0.0,
            return_max: 1.0,
        }
    }
}

impl ReturnTokenizer {
    pub fn new(n_bins: usize, return_min: f32, return_max: f32) -> Result<Self, ConfigError> {
        if n_bins < 2 {
            return Err(ConfigError::invalid("n_return_bins", "must be >= 2"));
        }
        if !(return_min < return_max) {
            return Err(ConfigError::invalid("tokenizer", "return_min must be below return_max"));
        }
        Ok(Self {
            n_bins,
            return_min,
            return_max,
        })
    }

    pub fn width(&self) -> f64 {
        (self.return_max as f64 - self.return_min as f64) / self.n_bins as f64
    }

    /// Clamps into range, then bins; the upper bound lands in the last bin.
    pub fn tokenize(&self, r: f32) -> usize {
        let lo = self.return_min as f64;
        let r = (r as f64).clamp(lo, self.return_max as f64);
        let b = ((r - lo) / self.width()).floor() as usize;
        b.min(self.n_bins - 1)
    }

    /// Bin center.
    pub fn detokenize(&self, bin: usize) -> f32 {
        self.center(bin) as f32
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.return_min as f64 + (bin as f64 + 0.5) * self.width()
    }
}

/// Fixed-length model input, left-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWindow {
    /// Normalized observations.
    pub obs: Vec<Vec<f32>>,
    /// Scaled return-to-go tokens.
    pub returns: Vec<f32>,
    pub actions: Vec<Action>,
    /// Global environment timestep of each position.
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
    pub trajectory: usize,
    pub start: usize,
}

impl TokenWindow {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Number of left-padded positions.
    pub fn n_pad(&self) -> usize {
        self.valid.iter().take_while(|v| !**v).count()
    }

    pub fn n_valid(&self) -> usize {
        self.len() - self.n_pad()
    }

    /// Assembles a window of length `t_max` from valid entries, left-padding
    /// the rest.
    #[allow(clippy::too_many_arguments)]
    pub fn from_valid(
        t_max: usize,
        obs: Vec<Vec<f32>>,
        returns: Vec<f32>,
        actions: Vec<Action>,
        timesteps: Vec<usize>,
        space: &ActionSpace,
        trajectory: usize,
        start: usize,
    ) -> Self {
        let n = obs.len();
        assert!(n <= t_max && n >= 1, "window holds 1..=T entries");
        assert!(returns.len() == n && actions.len() == n && timesteps.len() == n);
        let pad = t_max - n;
        let obs_dim = obs[0].len();
        let mut w = Self {
            obs: vec![vec![0.0; obs_dim]; pad],
            returns: vec![0.0; pad],
            actions: vec![space.null_action(); pad],
            timesteps: vec![0; pad],
            valid: vec![false; pad],
            trajectory,
            start,
        };
        w.obs.extend(obs);
        w.returns.extend(returns);
        w.actions.extend(actions);
        w.timesteps.extend(timesteps);
        w.valid.extend(std::iter::repeat_n(true, n));
        w
    }

    /// Window over steps `start..start+len` of a trajectory.
    pub fn from_trajectory(
        ds: &Dataset,
        trajectory: usize,
        start: usize,
        len: usize,
        t_max: usize,
    ) -> Self {
        let traj = &ds.trajectories[trajectory];
        let stats = ds.stats();
        let end = start + len;
        assert!(end <= traj.steps());
        Self::from_valid(
            t_max,
            traj.observations[start..end].iter().map(|o| stats.normalize_obs(o)).collect(),
            traj.returns_to_go[start..end].iter().map(|&r| stats.scale_return(r)).collect(),
            traj.actions[start..end].to_vec(),
            (start..end).collect(),
            &ds.action_space,
            trajectory,
            start,
        )
    }
}

/// Samples a trajectory proportionally to its step count and a uniform start
/// step, then covers up to `t_max` steps from there.
pub fn sample_training_window(ds: &Dataset, t_max: usize, rng: &mut impl Rng) -> Result<TokenWindow, ConfigError> {
    if t_max == 0 {
        return Err(ConfigError::invalid("T", "must be >= 1"));
    }
    let weights: Vec<usize> = ds.trajectories.iter().map(Trajectory::steps).collect();
    let picker = WeightedIndex::new(&weights).map_err(|_| ConfigError::invalid("dataset", "no transitions to sample"))?;
    let ti = picker.sample(rng);
    let steps = weights[ti];
    let start = rng.random_range(0..steps);
    let len = (steps - start).min(t_max);
    Ok(TokenWindow::from_trajectory(ds, ti, start, len, t_max))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeLine {
    obs: Vec<Vec<f32>>,
    act: Vec<Action>,
    rew: Vec<f32>,
}

/// Writes the JSON Lines dataset: a `meta` header, then one episode per line.
pub fn write_jsonl(ds: &Dataset, mut out: impl Write) -> Result<(), Error> {
    let header = HeaderLine { meta: ds.meta.clone() };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for t in &ds.trajectories {
        let line = EpisodeLine {
            obs: t.observations.clone(),
            act: t.actions.clone(),
            rew: t.rewards.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Dataset, Error> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| ConfigError::invalid("dataset", "empty file"))??;
    let header: HeaderLine = serde_json::from_str(&first)?;
    let space = header.meta.env.build()?.action_space().clone();
    if space.kind() != header.meta.action_kind {
        return Err(ConfigError::invalid("meta.action_kind", "does not match the env").into());
    }
    let mut trajectories = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: EpisodeLine = serde_json::from_str(&line)?;
        trajectories.push(Trajectory::new(ep.obs, ep.act, ep.rew)?);
    }
    Ok(Dataset::new(header.meta, space, trajectories)?)
}
