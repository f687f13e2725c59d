//! Run configuration: one JSON document covering every stage.

use std::fs;
use std::path::{Path, PathBuf};

use edt_core::data::Dataset;
use edt_core::envs::{Env, EnvSpec, PolicySpec};
use edt_core::inference::InferenceConfig;
use edt_core::model::ModelConfig;
use edt_core::training::TrainConfig;
use edt_core::ConfigError;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Free text, ignored by every command.
    pub notes: Vec<String>,
    pub env: EnvSpec,
    /// Behavior policy for `gen-data`; `None` picks the env's canonical one.
    pub policy: Option<PolicySpec>,
    /// Episodes in a generated dataset.
    pub n_episodes: usize,
    /// Dataset file; defaults to `<out_dir>/dataset.jsonl`.
    pub dataset: Option<PathBuf>,
    /// Checkpoint read by `eval`; defaults to `<out_dir>/checkpoint.edt`.
    pub checkpoint: Option<PathBuf>,
    /// Continue training from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
    pub data: DataOptions,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub sweep: Option<Sweep>,
    pub out_dir: PathBuf,
    pub seeds: Seeds,
}

/// Preprocessing applied to a dataset before training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    /// Clip rewards to [-1, 1] before computing returns.
    pub reward_clip: bool,
    /// Fixed `[min, max]` for return scaling instead of the dataset range.
    pub return_bounds: Option<[f32; 2]>,
}

impl DataOptions {
    pub fn prepare(&self, ds: Dataset) -> Result<Dataset, ConfigError> {
        let ds = if self.reward_clip { ds.clip_rewards() } else { ds };
        match self.return_bounds {
            Some([lo, hi]) => ds.with_return_bounds(lo, hi).map_err(|e| ConfigError::invalid("data.return_bounds", e.reason)),
            None => Ok(ds),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            notes: Vec::new(),
            env: EnvSpec::Fork,
            policy: None,
            n_episodes: 100,
            dataset: None,
            checkpoint: None,
            resume: None,
            data: DataOptions::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            sweep: None,
            out_dir: PathBuf::from("runs/edt"),
            seeds: Seeds::default(),
        }
    }
}

/// Architecture sizes; observation, action and timestep sizes come from the
/// environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_return_bins: usize,
    pub context_len: usize,
    /// Defaults to the env horizon.
    pub max_timestep: Option<usize>,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_layers: 3,
            n_heads: 4,
            n_return_bins: 60,
            context_len: 20,
            max_timestep: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_episodes: usize,
    /// Start state name; `None` samples the env's initial states.
    pub start: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 100,
            start: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Dataset generation.
    pub data: u64,
    /// Sampler and initialization.
    pub train: u64,
    /// Evaluation episodes.
    pub eval: u64,
    /// Shared seeds of an ablation; each drives both training and evaluation.
    pub sweep: Vec<u64>,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 7,
            train: 0,
            eval: 0,
            sweep: (0..5).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Delta,
    FixedW,
    Elastic,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self, ConfigError> {
        match name {
            "alpha" => Ok(Self::Alpha),
            "delta" => Ok(Self::Delta),
            "fixed_w" => Ok(Self::FixedW),
            "elastic" => Ok(Self::Elastic),
            other => Err(ConfigError::invalid(
                "sweep.param",
                format!("unknown parameter `{other}` (expected alpha, delta, fixed_w or elastic)"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Delta => "delta",
            Self::FixedW => "fixed_w",
            Self::Elastic => "elastic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: String,
    pub values: Vec<serde_json::Value>,
}

/// One parsed sweep value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepValue {
    Alpha(f64),
    Delta(usize),
    FixedW(usize),
    /// `true` runs the length search, `false` the full-length baseline.
    Elastic(bool),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match *self {
            SweepValue::Alpha(a) => a.to_string(),
            SweepValue::Delta(d) | SweepValue::FixedW(d) => d.to_string(),
            SweepValue::Elastic(e) => if e { "elastic" } else { "fixed" }.to_string(),
        }
    }
}

impl Sweep {
    /// Parses `name=v1,v2,...` from the command line.
    pub fn from_arg(arg: &str) -> Result<Self, ConfigError> {
        let (param, values) = arg
            .split_once('=')
            .ok_or_else(|| ConfigError::invalid("sweep", "expected NAME=V1,V2,..."))?;
        let values = values
            .split(',')
            .map(|v| serde_json::from_str(v.trim()).unwrap_or_else(|_| serde_json::Value::String(v.trim().to_string())))
            .collect();
        Ok(Self {
            param: param.trim().to_string(),
            values,
        })
    }

    pub fn parse(&self) -> Result<(SweepParam, Vec<SweepValue>), ConfigError> {
        let param = SweepParam::parse(&self.param)?;
        if self.values.is_empty() {
            return Err(ConfigError::invalid("sweep.values", "no values"));
        }
        let bad = |v: &serde_json::Value| ConfigError::invalid("sweep.values", format!("`{v}` is not a valid {}", param.name()));
        let values = self
            .values
            .iter()
            .map(|v| match param {
                SweepParam::Alpha => v.as_f64().map(SweepValue::Alpha).ok_or_else(|| bad(v)),
                SweepParam::Delta => v.as_u64().map(|d| SweepValue::Delta(d as usize)).ok_or_else(|| bad(v)),
                SweepParam::FixedW => v.as_u64().map(|w| SweepValue::FixedW(w as usize)).ok_or_else(|| bad(v)),
                SweepParam::Elastic => match v {
                    serde_json::Value::Bool(b) => Ok(SweepValue::Elastic(*b)),
                    serde_json::Value::String(s) if s == "elastic" => Ok(SweepValue::Elastic(true)),
                    serde_json::Value::String(s) if s == "fixed" => Ok(SweepValue::Elastic(false)),
                    _ => Err(bad(v)),
                },
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((param, values))
    }
}

/// Command-line overrides, applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Seed of the stage being run.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub fixed_w: Option<usize>,
    pub delta: Option<usize>,
    pub alpha: Option<f64>,
    pub kappa: Option<f64>,
    pub sweep: Option<String>,
}

/// Which stage a `--seed` override targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    Eval,
    Ablate,
}

impl RunConfig {
    /// Parses a config; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "config".to_string() } else { path };
            ConfigError::invalid(field, e.into_inner().to_string())
        })
    }

    /// Reads a config file; a missing path is an I/O error.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        use anyhow::Context;
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Ok(Self::from_json(&text)?)
    }

    pub fn apply(&mut self, o: &Overrides, stage: Stage) -> Result<(), ConfigError> {
        if let Some(seed) = o.seed {
            match stage {
                Stage::GenData => self.seeds.data = seed,
                Stage::Train => self.seeds.train = seed,
                Stage::Eval => self.seeds.eval = seed,
                Stage::Ablate => self.seeds.sweep = vec![seed],
            }
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if o.fixed_w.is_some() {
            self.inference.fixed_w = o.fixed_w;
        }
        if let Some(d) = o.delta {
            self.inference.delta = d;
        }
        if let Some(a) = o.alpha {
            self.train.alpha = a;
        }
        if let Some(k) = o.kappa {
            self.inference.kappa = k;
        }
        if let Some(s) = &o.sweep {
            self.sweep = Some(Sweep::from_arg(s)?);
        }
        Ok(())
    }

    pub fn build_env(&self) -> Result<Env, ConfigError> {
        self.env.build().map_err(|e| ConfigError::invalid(format!("env.{}", e.field), e.reason))
    }

    pub fn policy(&self) -> PolicySpec {
        self.policy.clone().unwrap_or_else(|| match self.env {
            EnvSpec::Fork => PolicySpec::fork_two_policy(),
            EnvSpec::Chain { .. } => PolicySpec::medium_replay(),
        })
    }

    pub fn model_config(&self, env: &Env) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            embed_dim: m.embed_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_timestep: m.max_timestep.unwrap_or(env.horizon()),
            obs_dim: env.obs_dim(),
            action_space: env.action_space().clone(),
            n_return_bins: m.n_return_bins,
            context_len: m.context_len,
        }
    }

    /// Training configuration with the run's training seed.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        if self.train.seed != 0 && self.train.seed != self.seeds.train {
            return Err(ConfigError::invalid("train.seed", "set seeds.train instead"));
        }
        Ok(TrainConfig {
            seed: self.seeds.train,
            ..self.train.clone()
        })
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("checkpoint.edt"))
    }

    /// Start state index named by `eval.start`.
    pub fn start_state(&self, env: &Env) -> Result<Option<usize>, ConfigError> {
        match &self.eval.start {
            None => Ok(None),
            Some(name) => env
                .state_by_name(name)
                .filter(|&s| !env.is_terminal(s))
                .map(Some)
                .ok_or_else(|| ConfigError::invalid("eval.start", format!("`{name}` is not a non-terminal state"))),
        }
    }

    /// Checks everything that does not need files.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let env = self.build_env()?;
        self.policy().validate()?;
        if self.n_episodes == 0 {
            return Err(ConfigError::invalid("n_episodes", "must be >= 1"));
        }
        if self.eval.n_episodes == 0 {
            return Err(ConfigError::invalid("eval.n_episodes", "must be >= 1"));
        }
        let model = self.model_config(&env);
        model.validate()?;
        self.train_config()?.validate()?;
        self.inference.validate(&model)?;
        self.start_state(&env)?;
        if let Some(s) = &self.sweep {
            s.parse()?;
        }
        if let Some([lo, hi]) = self.data.return_bounds {
            if !(lo < hi) {
                return Err(ConfigError::invalid("data.return_bounds", "min must be below max"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"evn": {"name": "fork"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"alpah": 0.9}}"#).is_err());
        let err = RunConfig::from_json(r#"{"env": {"name": "maze"}}"#).unwrap_err();
        assert_eq!(err.field, "env.name");
    }

    #[test]
    fn nested_defaults_fill_in() {
        let c = RunConfig::from_json(r#"{"env": {"name": "chain", "length": 5, "horizon": 6, "left_reward": 0.2, "right_reward": 1.0}, "inference": {"delta": 1}}"#).unwrap();
        assert_eq!(c.inference.delta, 1);
        assert_eq!(c.inference.kappa, 10.0);
        assert_eq!(c.policy(), PolicySpec::medium_replay());
        let env = c.build_env().unwrap();
        assert_eq!(c.model_config(&env).max_timestep, 6);
    }

    #[test]
    fn seed_override_targets_the_stage() {
        let mut c = RunConfig::default();
        let o = Overrides {
            seed: Some(9),
            ..Default::default()
        };
        c.apply(&o, Stage::Train).unwrap();
        assert_eq!((c.seeds.data, c.seeds.train, c.seeds.eval), (7, 9, 0));
        c.apply(&o, Stage::Ablate).unwrap();
        assert_eq!(c.seeds.sweep, vec![9]);
    }

    #[test]
    fn sweep_parsing() {
        let s = Sweep::from_arg("alpha=0.5,0.9,0.99").unwrap();
        let (p, v) = s.parse().unwrap();
        assert_eq!(p, SweepParam::Alpha);
        assert_eq!(v, vec![SweepValue::Alpha(0.5), SweepValue::Alpha(0.9), SweepValue::Alpha(0.99)]);
        let (_, v) = Sweep::from_arg("elastic=elastic,fixed").unwrap().parse().unwrap();
        assert_eq!(v, vec![SweepValue::Elastic(true), SweepValue::Elastic(false)]);
        let err = Sweep::from_arg("gamma=1").unwrap().parse().unwrap_err();
        assert_eq!(err.field, "sweep.param");
        assert!(Sweep::from_arg("delta=a").unwrap().parse().is_err());
    }

    #[test]
    fn conflicting_train_seed_is_rejected() {
        let mut c = RunConfig::default();
        c.train.seed = 3;
        assert_eq!(c.validate().unwrap_err().field, "train.seed");
    }

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                let c = RunConfig::load(&path).unwrap();
                c.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                n += 1;
            }
        }
        assert!(n >= 2);
    }

    #[test]
    fn data_options() {
        let c = RunConfig::from_json(r#"{"data":{"reward_clip":true,"return_bounds":[0,2]}}"#).unwrap();
        assert!(c.data.reward_clip);
        assert_eq!(c.data.return_bounds, Some([0.0, 2.0]));
        let c = RunConfig::from_json(r#"{"data":{"return_bounds":[2,0]}}"#).unwrap();
        assert_eq!(c.validate().unwrap_err().field, "data.return_bounds");
    }
}
