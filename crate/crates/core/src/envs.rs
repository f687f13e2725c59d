//! Small deterministic MDPs that make trajectory stitching necessary, behavior
//! policies that generate offline datasets on them, and an exact optimum.
//!
//! The chain corridor is a construction of this crate, not a standard
//! benchmark; the fork reproduces the two-trajectory motivating example.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, Trajectory};
use crate::ConfigError;

/// Fork state indices.
pub mod fork {
    pub const START_A: usize = 0;
    pub const START_B: usize = 1;
    pub const MID: usize = 2;
    pub const END_GOOD: usize = 3;
    pub const END_BAD: usize = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    /// Each dimension lives in `[-1, 1]`.
    Continuous { dim: usize },
    Discrete { n: usize },
}

impl ActionSpace {
    pub fn kind(&self) -> ActionKind {
        match self {
            ActionSpace::Continuous { .. } => ActionKind::Continuous,
            ActionSpace::Discrete { .. } => ActionKind::Discrete,
        }
    }

    /// Width of the action head: dims for continuous, arity for discrete.
    pub fn width(&self) -> usize {
        match *self {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { n } => n,
        }
    }

    /// The action used for padded window positions.
    pub fn null_action(&self) -> Action {
        match *self {
            ActionSpace::Continuous { dim } => Action::Continuous(vec![0.0; dim]),
            ActionSpace::Discrete { .. } => Action::Discrete(0),
        }
    }

    pub fn contains(&self, a: &Action) -> bool {
        match (self, a) {
            (ActionSpace::Continuous { dim }, Action::Continuous(v)) => v.len() == *dim,
            (ActionSpace::Discrete { n }, Action::Discrete(i)) => i < n,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Continuous,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f32>),
}

/// Serializable environment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Fork,
    Chain {
        length: usize,
        horizon: usize,
        left_reward: f64,
        right_reward: f64,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Fork
    }
}

impl EnvSpec {
    pub fn build(&self) -> Result<Env, ConfigError> {
        match *self {
            EnvSpec::Fork => Ok(make_fork_env()),
            EnvSpec::Chain {
                length,
                horizon,
                left_reward,
                right_reward,
            } => make_chain_env(length, horizon, left_reward, right_reward),
        }
    }

    /// Desk default chain: 9 cells, 12 steps, rewards 0.3 / 1.0.
    pub fn default_chain() -> Self {
        EnvSpec::Chain {
            length: 9,
            horizon: 12,
            left_reward: 0.3,
            right_reward: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Dynamics {
    Fork,
    Chain {
        length: usize,
        left_reward: f64,
        right_reward: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub next_state: usize,
    pub reward: f64,
    pub done: bool,
}

/// A finite deterministic MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    spec: EnvSpec,
    dynamics: Dynamics,
    n_states: usize,
    horizon: usize,
    action_space: ActionSpace,
    initial_states: Vec<usize>,
    terminal: Vec<bool>,
}

pub fn make_fork_env() -> Env {
    let mut terminal = vec![false; 5];
    terminal[fork::END_GOOD] = true;
    terminal[fork::END_BAD] = true;
    Env {
        spec: EnvSpec::Fork,
        dynamics: Dynamics::Fork,
        n_states: 5,
        horizon: 2,
        action_space: ActionSpace::Continuous { dim: 1 },
        initial_states: vec![fork::START_A, fork::START_B],
        terminal,
    }
}

pub fn make_chain_env(length: usize, horizon: usize, left_reward: f64, right_reward: f64) -> Result<Env, ConfigError> {
    if length < 5 || length % 2 == 0 {
        return Err(ConfigError::invalid("env.length", "must be an odd integer >= 5"));
    }
    if horizon == 0 {
        return Err(ConfigError::invalid("env.horizon", "must be >= 1"));
    }
    if !(left_reward > 0.0 && right_reward > left_reward && right_reward.is_finite()) {
        return Err(ConfigError::invalid(
            "env.right_reward",
            "rewards must satisfy right_reward > left_reward > 0",
        ));
    }
    let mut terminal = vec![false; length];
    terminal[0] = true;
    terminal[length - 1] = true;
    Ok(Env {
        spec: EnvSpec::Chain {
            length,
            horizon,
            left_reward,
            right_reward,
        },
        dynamics: Dynamics::Chain {
            length,
            left_reward,
            right_reward,
        },
        n_states: length,
        horizon,
        action_space: ActionSpace::Discrete { n: 2 },
        initial_states: vec![length / 2],
        terminal,
    })
}

/// Discrete chain actions.
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn obs_dim(&self) -> usize {
        self.n_states
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.action_space
    }

    /// Uniform initial-state support.
    pub fn initial_states(&self) -> &[usize] {
        &self.initial_states
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// One-hot observation of a state.
    pub fn observe(&self, s: usize) -> Vec<f32> {
        let mut o = vec![0.0; self.n_states];
        o[s] = 1.0;
        o
    }

    /// Inverse of [`Env::observe`].
    pub fn state_of(&self, obs: &[f32]) -> Option<usize> {
        if obs.len() != self.n_states {
            return None;
        }
        let hot: Vec<usize> = (0..obs.len()).filter(|&i| obs[i] == 1.0).collect();
        let rest_zero = obs.iter().filter(|&&x| x == 0.0).count() == obs.len() - 1;
        (hot.len() == 1 && rest_zero).then(|| hot[0])
    }

    pub fn step(&self, s: usize, a: &Action) -> Transition {
        debug_assert!(!self.terminal[s], "step from terminal state");
        match (&self.dynamics, a) {
            (Dynamics::Fork, Action::Continuous(v)) => match s {
                fork::START_A | fork::START_B => Transition {
                    next_state: fork::MID,
                    reward: 0.0,
                    done: false,
                },
                _ => {
                    let good = v[0] >= 0.0;
                    Transition {
                        next_state: if good { fork::END_GOOD } else { fork::END_BAD },
                        reward: if good { 1.0 } else { 0.0 },
                        done: true,
                    }
                }
            },
            (
                &Dynamics::Chain {
                    length,
                    left_reward,
                    right_reward,
                },
                &Action::Discrete(i),
            ) => {
                let next = if i == LEFT { s - 1 } else { s + 1 };
                let (reward, done) = if next == 0 {
                    (left_reward, true)
                } else if next == length - 1 {
                    (right_reward, true)
                } else {
                    (0.0, false)
                };
                Transition {
                    next_state: next,
                    reward,
                    done,
                }
            }
            _ => panic!("action {a:?} does not match env action space {:?}", self.action_space),
        }
    }

    /// One representative action per distinct transition outcome; enough for
    /// exact dynamic programming.
    pub fn representative_actions(&self) -> Vec<Action> {
        match self.dynamics {
            Dynamics::Fork => vec![Action::Continuous(vec![1.0]), Action::Continuous(vec![-1.0])],
            Dynamics::Chain { .. } => vec![Action::Discrete(LEFT), Action::Discrete(RIGHT)],
        }
    }

    /// Action of the policy that heads for the best outcome.
    pub fn good_action(&self) -> Action {
        match self.dynamics {
            Dynamics::Fork => Action::Continuous(vec![1.0]),
            Dynamics::Chain { .. } => Action::Discrete(RIGHT),
        }
    }

    /// Action of the policy that heads for the poor outcome.
    pub fn bad_action(&self) -> Action {
        match self.dynamics {
            Dynamics::Fork => Action::Continuous(vec![-1.0]),
            Dynamics::Chain { .. } => Action::Discrete(LEFT),
        }
    }

    pub fn random_action(&self, rng: &mut impl Rng) -> Action {
        match self.action_space {
            ActionSpace::Continuous { dim } => Action::Continuous((0..dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect()),
            ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..n)),
        }
    }

    pub fn state_name(&self, s: usize) -> String {
        match self.dynamics {
            Dynamics::Fork => ["start_a", "start_b", "mid", "end_good", "end_bad"][s].to_string(),
            Dynamics::Chain { .. } => format!("cell_{s}"),
        }
    }

    pub fn state_by_name(&self, name: &str) -> Option<usize> {
        (0..self.n_states).find(|&s| self.state_name(s) == name)
    }

    /// Runs `actions` from `start`, returning visited states and rewards.
    /// Fails if the episode terminates before the actions are exhausted.
    pub fn replay(&self, start: usize, actions: &[Action]) -> Option<(Vec<usize>, Vec<f64>)> {
        let mut states = vec![start];
        let mut rewards = Vec::new();
        let mut s = start;
        for (t, a) in actions.iter().enumerate() {
            if self.terminal[s] || t >= self.horizon || !self.action_space.contains(a) {
                return None;
            }
            let tr = self.step(s, a);
            s = tr.next_state;
            states.push(s);
            rewards.push(tr.reward);
        }
        Some((states, rewards))
    }
}

/// Exact optimal undiscounted return from `start` within the horizon, by
/// backward induction over (state, steps remaining).
pub fn optimal_return_oracle(env: &Env, start: usize) -> f64 {
    let actions = env.representative_actions();
    let mut value = vec![0.0f64; env.n_states];
    for _ in 0..env.horizon {
        let mut next = vec![0.0f64; env.n_states];
        for s in 0..env.n_states {
            if env.is_terminal(s) {
                continue;
            }
            next[s] = actions
                .iter()
                .map(|a| {
                    let tr = env.step(s, a);
                    tr.reward + if tr.done { 0.0 } else { value[tr.next_state] }
                })
                .fold(f64::NEG_INFINITY, f64::max);
        }
        value = next;
    }
    value[start]
}

/// Behavior policy families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    ScriptedGood,
    ScriptedBad,
    /// With probability `epsilon` take the poor-goal action, otherwise act
    /// uniformly at random.
    EpsilonMediocre { epsilon: f64 },
    Random,
    /// Episodes are split across components in proportion to their weights;
    /// a component may pin the start state by name.
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub policy: PolicySpec,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<String>,
}

impl PolicySpec {
    /// Fork dataset: good-policy episodes from `start_a`, bad-policy
    /// episodes from `start_b`, half each.
    pub fn fork_two_policy() -> Self {
        PolicySpec::Mixture {
            components: vec![
                MixtureComponent {
                    policy: PolicySpec::ScriptedGood,
                    weight: 0.5,
                    start: Some("start_a".into()),
                },
                MixtureComponent {
                    policy: PolicySpec::ScriptedBad,
                    weight: 0.5,
                    start: Some("start_b".into()),
                },
            ],
        }
    }

    /// "Medium" analog.
    pub fn mediocre() -> Self {
        PolicySpec::EpsilonMediocre { epsilon: 0.3 }
    }

    /// "Medium-replay" analog: random and mediocre episodes, half each.
    pub fn medium_replay() -> Self {
        PolicySpec::Mixture {
            components: vec![
                MixtureComponent {
                    policy: PolicySpec::Random,
                    weight: 0.5,
                    start: None,
                },
                MixtureComponent {
                    policy: PolicySpec::mediocre(),
                    weight: 0.5,
                    start: None,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            PolicySpec::EpsilonMediocre { epsilon } if !(0.0..=1.0).contains(epsilon) => {
                Err(ConfigError::invalid("policy.epsilon", "must lie in [0, 1]"))
            }
            PolicySpec::Mixture { components } => {
                if components.is_empty() {
                    return Err(ConfigError::invalid("policy.components", "mixture needs components"));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| c.weight < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(ConfigError::invalid("policy.components", "weights must be >= 0 and sum to 1"));
                }
                for c in components {
                    if matches!(c.policy, PolicySpec::Mixture { .. }) {
                        return Err(ConfigError::invalid("policy.components", "nested mixtures are not supported"));
                    }
                    c.policy.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn act(&self, env: &Env, rng: &mut impl Rng) -> Action {
        match self {
            PolicySpec::ScriptedGood => env.good_action(),
            PolicySpec::ScriptedBad => env.bad_action(),
            PolicySpec::Random => env.random_action(rng),
            PolicySpec::EpsilonMediocre { epsilon } => {
                if rng.random_bool(*epsilon) {
                    env.bad_action()
                } else {
                    env.random_action(rng)
                }
            }
            PolicySpec::Mixture { .. } => unreachable!("mixtures are resolved per episode"),
        }
    }
}

/// Per-episode RNG stream derived from `(seed, index)`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Splits `n` episodes over weights by largest remainder.
fn allocate(weights: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Rolls out one episode of `policy` from `start`.
pub fn run_episode(env: &Env, policy: &PolicySpec, start: usize, rng: &mut impl Rng) -> Trajectory {
    let mut s = start;
    let mut obs = vec![env.observe(s)];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for _ in 0..env.horizon() {
        let a = policy.act(env, rng);
        let tr = env.step(s, &a);
        actions.push(a);
        rewards.push(tr.reward as f32);
        s = tr.next_state;
        obs.push(env.observe(s));
        if tr.done {
            break;
        }
    }
    Trajectory::new(obs, actions, rewards).expect("rollout produces consistent lengths")
}

/// Generates `n_episodes` behavior episodes. Deterministic in `seed`; each
/// episode draws from its own stream.
pub fn generate_dataset(env: &Env, spec: &PolicySpec, n_episodes: usize, seed: u64) -> Result<Dataset, ConfigError> {
    if n_episodes == 0 {
        return Err(ConfigError::invalid("n_episodes", "must be >= 1"));
    }
    spec.validate()?;

    // (policy, pinned start) per episode
    let plan: Vec<(PolicySpec, Option<usize>)> = match spec {
        PolicySpec::Mixture { components } => {
            let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
            let mut plan = Vec::with_capacity(n_episodes);
            for (c, count) in components.iter().zip(allocate(&weights, n_episodes)) {
                let start = match &c.start {
                    Some(name) => Some(
                        env.state_by_name(name)
                            .filter(|&s| !env.is_terminal(s))
                            .ok_or_else(|| ConfigError::invalid("policy.components.start", format!("unknown start state `{name}`")))?,
                    ),
                    None => None,
                };
                plan.extend(std::iter::repeat_n((c.policy.clone(), start), count));
            }
            plan.shuffle(&mut episode_rng(seed, u64::MAX));
            plan
        }
        other => vec![(other.clone(), None); n_episodes],
    };

    let trajectories = plan
        .iter()
        .enumerate()
        .map(|(i, (policy, start))| {
            let mut rng = episode_rng(seed, i as u64);
            let s0 = start.unwrap_or_else(|| {
                let init = env.initial_states();
                init[rng.random_range(0..init.len())]
            });
            run_episode(env, policy, s0, &mut rng)
        })
        .collect();

    let meta = DatasetMeta {
        env: env.spec().clone(),
        seed,
        policy: spec.clone(),
        action_kind: env.action_space().kind(),
    };
    Dataset::new(meta, env.action_space().clone(), trajectories)
}
