//! Elastic action selection and rollouts.
//!
//! Each decision runs one return-masked forward pass per candidate history
//! length, keeps the length with the highest maximum-return estimate, samples
//! a return token from the reweighted return distribution at that length and
//! finally predicts the action conditioned on it.

use std::collections::VecDeque;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataStats, ReturnTokenizer, TokenWindow};
use crate::envs::{episode_rng, Action, ActionSpace, Env};
use crate::model::{forward, AttentionMode, ModelConfig};
use crate::numerics::{log_sum_exp, ParamStore};
use crate::training::Checkpoint;
use crate::{ConfigError, Error};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Longest history considered; at most the model context.
    pub context_len: usize,
    /// Stride of the length grid.
    pub delta: usize,
    /// Inverse temperature of the expert-return reweighting.
    pub kappa: f64,
    /// Percentile for return and discrete-action sampling.
    pub pct: f64,
    /// Forces a constant history length.
    pub fixed_w: Option<usize>,
    /// Searches around the previous choice instead of the full grid.
    pub heuristic: bool,
    /// Half-width of the local search; defaults to `2 * delta`.
    pub local_delta: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            context_len: 20,
            delta: 2,
            kappa: 10.0,
            pct: 0.85,
            fixed_w: None,
            heuristic: false,
            local_delta: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), ConfigError> {
        if self.context_len == 0 || self.context_len > model.context_len {
            return Err(ConfigError::invalid(
                "inference.context_len",
                format!("must lie in 1..={}", model.context_len),
            ));
        }
        if self.delta == 0 {
            return Err(ConfigError::invalid("inference.delta", "must be >= 1"));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(ConfigError::invalid("inference.kappa", "must be finite and >= 0"));
        }
        if !(self.pct > 0.0 && self.pct < 1.0) {
            return Err(ConfigError::invalid("inference.pct", "must lie in (0, 1)"));
        }
        if let Some(w) = self.fixed_w {
            if w == 0 || w > self.context_len {
                return Err(ConfigError::invalid(
                    "inference.fixed_w",
                    format!("must lie in 1..={}", self.context_len),
                ));
            }
        }
        Ok(())
    }

    pub fn local_delta(&self) -> usize {
        self.local_delta.unwrap_or(2 * self.delta)
    }
}

/// One past step as the model saw it.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    /// Normalized observation.
    pub obs: Vec<f32>,
    pub action: Action,
    /// Scaled return token that was sampled at this step.
    pub return_token: f32,
    pub timestep: usize,
}

/// The most recent steps of the current episode, oldest first.
#[derive(Clone, Debug)]
pub struct TraversedBuffer {
    entries: VecDeque<BufferEntry>,
    capacity: usize,
}

impl TraversedBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends a step, dropping the oldest one when full.
    pub fn push(&mut self, entry: BufferEntry) {
        if let Some(last) = self.entries.back() {
            assert_eq!(entry.timestep, last.timestep + 1, "timesteps must be contiguous");
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    /// Window of the last `w - 1` stored steps followed by the current step.
    fn window(&self, w: usize, t_max: usize, current: &BufferEntry, space: &ActionSpace) -> TokenWindow {
        let past = w - 1;
        assert!(past <= self.entries.len() && w <= t_max);
        let tail = self.entries.iter().skip(self.entries.len() - past).chain(std::iter::once(current));
        let (mut obs, mut returns, mut actions, mut timesteps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for e in tail {
            obs.push(e.obs.clone());
            returns.push(e.return_token);
            actions.push(e.action.clone());
            timesteps.push(e.timestep);
        }
        let start = timesteps[0];
        TokenWindow::from_valid(t_max, obs, returns, actions, timesteps, space, 0, start)
    }
}

/// Lengths `T, T - delta, ...` within `[1, available]`, descending.
pub fn build_search_space(t_max: usize, delta: usize, available: usize) -> Vec<usize> {
    assert!(delta >= 1 && available >= 1);
    let lengths: Vec<usize> = (1..=t_max)
        .rev()
        .step_by(delta)
        .filter(|&w| w <= available)
        .collect();
    if lengths.is_empty() {
        vec![available]
    } else {
        lengths
    }
}

/// Contiguous lengths within `delta_local` of `prev_w`, clamped to
/// `[1, min(T, available)]`.
pub fn local_search_step(prev_w: usize, delta_local: usize, t_max: usize, available: usize) -> Vec<usize> {
    let hi_bound = t_max.min(available).max(1);
    let lo = prev_w.saturating_sub(delta_local).max(1);
    let hi = (prev_w + delta_local).min(hi_bound);
    if lo > hi {
        vec![hi_bound]
    } else {
        (lo..=hi).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub candidates: Vec<usize>,
    pub rtilde: Vec<f32>,
    pub chosen_w: usize,
    /// Return logits at the final observation for the chosen length.
    pub return_logits: Vec<f32>,
    /// Forward passes executed during the search.
    pub forward_passes: usize,
}

impl SearchResult {
    pub fn rtilde_max(&self) -> f32 {
        self.rtilde[self.chosen_index()]
    }

    fn chosen_index(&self) -> usize {
        self.candidates.iter().position(|&w| w == self.chosen_w).expect("chosen length is a candidate")
    }
}

/// Index of the largest score, ties to the longest length.
pub fn argmax_longest(lengths: &[usize], scores: &[f32]) -> usize {
    assert_eq!(lengths.len(), scores.len());
    let mut best = 0;
    for i in 1..lengths.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && lengths[i] > lengths[best]) {
            best = i;
        }
    }
    best
}

/// A trained model plus the statistics needed to feed it.
#[derive(Clone, Copy, Debug)]
pub struct Agent<'a> {
    pub params: &'a ParamStore<f32>,
    pub model: &'a ModelConfig,
    pub stats: &'a DataStats,
    pub tokenizer: &'a ReturnTokenizer,
}

impl<'a> Agent<'a> {
    pub fn from_checkpoint(ckpt: &'a Checkpoint) -> Self {
        Self {
            params: &ckpt.params,
            model: &ckpt.model,
            stats: &ckpt.stats,
            tokenizer: &ckpt.tokenizer,
        }
    }

    fn placeholder(&self, obs: &[f32], timestep: usize) -> BufferEntry {
        BufferEntry {
            obs: obs.to_vec(),
            action: self.model.action_space.null_action(),
            return_token: 0.0,
            timestep,
        }
    }
}

/// Runs one forward pass per candidate length over the truncation ending at
/// `current_obs` (normalized) and picks the length with the largest R̃.
pub fn estimate_max_returns(
    agent: &Agent,
    buffer: &TraversedBuffer,
    current_obs: &[f32],
    timestep: usize,
    lengths: &[usize],
) -> Result<SearchResult, Error> {
    if lengths.is_empty() {
        return Err(ConfigError::invalid("lengths", "search space is empty").into());
    }
    let current = agent.placeholder(current_obs, timestep);
    let t_max = agent.model.context_len;
    let mut forward_passes = 0;
    let mut rtilde = Vec::with_capacity(lengths.len());
    let mut logits = Vec::with_capacity(lengths.len());
    for &w in lengths {
        if w == 0 || w > buffer.len() + 1 || w > t_max {
            return Err(ConfigError::invalid("lengths", format!("length {w} exceeds the available history")).into());
        }
        let window = buffer.window(w, t_max, &current, &agent.model.action_space);
        let out = forward(agent.params, agent.model, &window, AttentionMode::ReturnMasked)?;
        forward_passes += 1;
        rtilde.push(out.rtilde.data()[t_max - 1]);
        logits.push(out.return_logits.row(t_max - 1).to_vec());
    }
    let best = argmax_longest(lengths, &rtilde);
    Ok(SearchResult {
        candidates: lengths.to_vec(),
        chosen_w: lengths[best],
        return_logits: logits.swap_remove(best),
        rtilde,
        forward_passes,
    })
}

/// `p(b) ∝ exp(kappa * center(b)) * softmax(logits)(b)`, in log space.
pub fn expert_return_distribution(return_logits: &[f32], tok: &ReturnTokenizer, kappa: f64) -> Vec<f64> {
    assert_eq!(return_logits.len(), tok.n_bins);
    assert!(kappa >= 0.0);
    let logits: Vec<f64> = return_logits.iter().map(|&x| x as f64).collect();
    let lse = log_sum_exp(&logits);
    let tilted: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(b, &l)| l - lse + kappa * tok.center(b))
        .collect();
    let norm = log_sum_exp(&tilted);
    tilted.iter().map(|&x| (x - norm).exp()).collect()
}

/// Linear-interpolation quantile of `values` at level `q`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Keeps entries at or above the `pct` quantile of `probs` (the argmax
/// always survives) and renormalizes.
pub fn top_percentile_filter(probs: &[f64], pct: f64) -> Vec<f64> {
    assert!(pct > 0.0 && pct < 1.0);
    let q = quantile(probs, pct);
    let argmax = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
    let kept: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if p >= q || i == argmax { p } else { 0.0 })
        .collect();
    let total: f64 = kept.iter().sum();
    if total > 0.0 {
        kept.iter().map(|p| p / total).collect()
    } else {
        let mut one_hot = vec![0.0; probs.len()];
        one_hot[argmax] = 1.0;
        one_hot
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    WeightedIndex::new(probs).expect("filtered distribution has positive mass").sample(rng)
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let l: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
    let lse = log_sum_exp(&l);
    l.iter().map(|x| (x - lse).exp()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub search: SearchResult,
    pub return_bin: usize,
    /// Scaled return token stored for this step.
    pub return_token: f32,
}

/// Candidate lengths for the next decision.
pub fn candidate_lengths(cfg: &InferenceConfig, buffer: &TraversedBuffer, prev_w: Option<usize>) -> Vec<usize> {
    let available = (buffer.len() + 1).min(cfg.context_len);
    match (cfg.fixed_w, prev_w) {
        (Some(w), _) => vec![w.min(available)],
        (None, Some(prev)) if cfg.heuristic => local_search_step(prev, cfg.local_delta(), cfg.context_len, available),
        _ => build_search_space(cfg.context_len, cfg.delta, available),
    }
}

/// Full decision pipeline for the current (normalized) observation.
pub fn select_action(
    agent: &Agent,
    buffer: &TraversedBuffer,
    current_obs: &[f32],
    timestep: usize,
    cfg: &InferenceConfig,
    prev_w: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Decision, Error> {
    let lengths = candidate_lengths(cfg, buffer, prev_w);
    let search = estimate_max_returns(agent, buffer, current_obs, timestep, &lengths)?;

    let expert = expert_return_distribution(&search.return_logits, agent.tokenizer, cfg.kappa);
    let return_bin = sample_index(&top_percentile_filter(&expert, cfg.pct), rng);
    let return_token = agent.tokenizer.center(return_bin) as f32;

    let mut current = agent.placeholder(current_obs, timestep);
    current.return_token = return_token;
    let t_max = agent.model.context_len;
    let window = buffer.window(search.chosen_w, t_max, &current, &agent.model.action_space);
    let out = forward(agent.params, agent.model, &window, AttentionMode::ReturnMasked)?;
    let head = out.action.row(t_max - 1);
    let action = match agent.model.action_space {
        ActionSpace::Continuous { .. } => Action::Continuous(head.to_vec()),
        ActionSpace::Discrete { .. } => {
            let probs = top_percentile_filter(&softmax(head), cfg.pct);
            Action::Discrete(sample_index(&probs, rng))
        }
    };
    Ok(Decision {
        action,
        search,
        return_bin,
        return_token,
    })
}

/// One row of the chosen-length log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionLog {
    pub episode: usize,
    pub step: usize,
    pub timestep: usize,
    pub state: usize,
    pub chosen_w: usize,
    pub rtilde_max: f32,
    pub sampled_return_bin: usize,
    pub forward_passes: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RolloutReport {
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    pub decisions: Vec<DecisionLog>,
}

impl RolloutReport {
    pub fn mean_return(&self) -> f64 {
        if self.returns.is_empty() {
            return 0.0;
        }
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    /// Population standard deviation of episode returns.
    pub fn std_return(&self) -> f64 {
        if self.returns.is_empty() {
            return 0.0;
        }
        let m = self.mean_return();
        (self.returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / self.returns.len() as f64).sqrt()
    }

    /// Count of decisions per chosen length `1..=t_max` (index 0 is w = 1).
    pub fn length_histogram(&self, t_max: usize) -> Vec<usize> {
        let mut h = vec![0; t_max];
        for d in &self.decisions {
            h[d.chosen_w - 1] += 1;
        }
        h
    }

    pub fn write_length_log(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "episode,step,timestep,chosen_w,rtilde_max,sampled_return_bin")?;
        for d in &self.decisions {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                d.episode, d.step, d.timestep, d.chosen_w, d.rtilde_max, d.sampled_return_bin
            )?;
        }
        Ok(())
    }
}

fn run_one(
    env: &Env,
    agent: &Agent,
    cfg: &InferenceConfig,
    episode: usize,
    start: Option<usize>,
    seed: u64,
) -> Result<(f64, Vec<DecisionLog>), Error> {
    let mut rng = episode_rng(seed, episode as u64);
    let mut state = match start {
        Some(s) => s,
        None => env.initial_states()[rng.random_range(0..env.initial_states().len())],
    };
    let mut buffer = TraversedBuffer::new(cfg.context_len);
    let mut prev_w = None;
    let mut total = 0.0;
    let mut log = Vec::new();
    for t in 0..env.horizon() {
        if env.is_terminal(state) {
            break;
        }
        let obs = agent.stats.normalize_obs(&env.observe(state));
        let d = select_action(agent, &buffer, &obs, t, cfg, prev_w, &mut rng)?;
        log.push(DecisionLog {
            episode,
            step: t,
            timestep: t,
            state,
            chosen_w: d.search.chosen_w,
            rtilde_max: d.search.rtilde_max(),
            sampled_return_bin: d.return_bin,
            forward_passes: d.search.forward_passes,
        });
        let tr = env.step(state, &d.action);
        total += tr.reward;
        prev_w = Some(d.search.chosen_w);
        buffer.push(BufferEntry {
            obs,
            action: d.action,
            return_token: d.return_token,
            timestep: t,
        });
        state = tr.next_state;
        if tr.done {
            break;
        }
    }
    Ok((total, log))
}

/// Runs `n_episodes` seeded episodes, optionally from a fixed start state.
/// Episodes run in parallel on independent streams; the report is in
/// episode order.
pub fn rollout(
    env: &Env,
    agent: &Agent,
    cfg: &InferenceConfig,
    n_episodes: usize,
    seed: u64,
    start: Option<usize>,
) -> Result<RolloutReport, Error> {
    cfg.validate(agent.model)?;
    if env.obs_dim() != agent.model.obs_dim || env.action_space() != &agent.model.action_space {
        return Err(ConfigError::invalid("env", "observation or action space does not match the model").into());
    }
    if env.horizon() > agent.model.max_timestep {
        return Err(ConfigError::invalid("env", "horizon exceeds the model's max_timestep").into());
    }
    if let Some(s) = start {
        if s >= env.n_states() || env.is_terminal(s) {
            return Err(ConfigError::invalid("start", "not a non-terminal state").into());
        }
    }
    let results: Vec<Result<(f64, Vec<DecisionLog>), Error>> = (0..n_episodes)
        .into_par_iter()
        .map(|e| run_one(env, agent, cfg, e, start, seed))
        .collect();
    let mut report = RolloutReport::default();
    for r in results {
        let (ret, log) = r?;
        report.returns.push(ret);
        report.lengths.push(log.len());
        report.decisions.extend(log);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{fork, generate_dataset, make_chain_env, make_fork_env, PolicySpec};
    use crate::model::init_model;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn search_space_examples() {
        assert_eq!(build_search_space(20, 8, 20), vec![20, 12, 4]);
        assert_eq!(build_search_space(20, 2, 25), (1..=10).rev().map(|k| 2 * k).collect::<Vec<_>>());
        assert_eq!(build_search_space(20, 2, 1), vec![1]);
        assert_eq!(build_search_space(20, 8, 3), vec![3]);
        assert_eq!(build_search_space(20, 8, 13), vec![12, 4]);
    }

    #[test]
    fn local_search_examples() {
        assert_eq!(local_search_step(10, 2, 20, 20), vec![8, 9, 10, 11, 12]);
        assert_eq!(local_search_step(1, 2, 20, 20), vec![1, 2, 3]);
        assert_eq!(local_search_step(20, 2, 20, 20), vec![18, 19, 20]);
    }

    proptest! {
        #[test]
        fn search_space_invariants(t in 1usize..40, delta in 1usize..10, available in 1usize..50) {
            let s = build_search_space(t, delta, available);
            prop_assert!(!s.is_empty());
            prop_assert!(s.windows(2).all(|w| w[0] > w[1]));
            prop_assert!(s.iter().all(|&w| w >= 1 && w <= available));
            if delta == 1 {
                prop_assert_eq!(s, (1..=t.min(available)).rev().collect::<Vec<_>>());
            }
        }

        #[test]
        fn argmax_ignores_monotone_transforms(scores in prop::collection::vec(-3.0f32..3.0, 1..12)) {
            let lengths: Vec<usize> = (1..=scores.len()).rev().collect();
            let a = argmax_longest(&lengths, &scores);
            let transformed: Vec<f32> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
            prop_assert_eq!(a, argmax_longest(&lengths, &transformed));
        }

        #[test]
        fn reweighting_properties(logits in prop::collection::vec(-4.0f32..4.0, 6), shift in -5.0f32..5.0, kappa in 0.01f64..20.0) {
            let tok = ReturnTokenizer::new(6, 0.0, 1.0).unwrap();
            let base = softmax(&logits);
            let p0 = expert_return_distribution(&logits, &tok, 0.0);
            for (a, b) in p0.iter().zip(&base) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let p = expert_return_distribution(&logits, &tok, kappa);
            let shifted: Vec<f32> = logits.iter().map(|l| l + shift).collect();
            let ps = expert_return_distribution(&shifted, &tok, kappa);
            for (a, b) in p.iter().zip(&ps) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..6 {
                for j in 0..i {
                    if base[i] >= base[j] {
                        prop_assert!(p[i] > p[j]);
                    }
                }
            }
        }

        #[test]
        fn filter_sums_to_one(probs in prop::collection::vec(0.0f64..1.0, 1..30), pct in 0.01f64..0.99) {
            let total: f64 = probs.iter().sum();
            prop_assume!(total > 0.0);
            let p: Vec<f64> = probs.iter().map(|x| x / total).collect();
            let f = top_percentile_filter(&p, pct);
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let argmax = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            prop_assert!(f[argmax] > 0.0);
            for (a, b) in f.iter().zip(&p) {
                prop_assert!(*b > 0.0 || *a == 0.0);
            }
        }
    }

    #[test]
    fn reweighting_two_bins() {
        let tok = ReturnTokenizer::new(2, -0.5, 1.5).unwrap();
        assert_eq!((tok.center(0), tok.center(1)), (0.0, 1.0));
        let p = expert_return_distribution(&[0.3, 0.3], &tok, 10.0);
        let e = 10f64.exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((p[0] - 4.54e-5).abs() < 1e-6);

        let masked = expert_return_distribution(&[f32::NEG_INFINITY, 0.0], &tok, 10.0);
        assert_eq!(masked, vec![0.0, 1.0]);
    }

    #[test]
    fn filter_examples() {
        assert_eq!(top_percentile_filter(&[0.0, 1.0, 0.0], 0.85), vec![0.0, 1.0, 0.0]);
        let u = vec![0.05; 20];
        assert!(top_percentile_filter(&u, 0.85).iter().all(|p| (p - 0.05).abs() < 1e-15));
        assert!((quantile(&[0.5, 0.3, 0.1, 0.1], 0.85) - 0.41).abs() < 1e-12);
        assert_eq!(top_percentile_filter(&[0.5, 0.3, 0.1, 0.1], 0.85), vec![1.0, 0.0, 0.0, 0.0]);
    }

    fn fork_agent_parts(seed: u64) -> (Env, ModelConfig, ParamStore<f32>, DataStats, ReturnTokenizer) {
        let env = make_fork_env();
        let ds = generate_dataset(&env, &PolicySpec::fork_two_policy(), 20, 0).unwrap();
        let mut model = ModelConfig::desk(env.obs_dim(), env.action_space().clone(), env.horizon());
        model.embed_dim = 16;
        model.n_layers = 1;
        model.n_heads = 2;
        let params = init_model(&model, seed).unwrap();
        (env, model, params, ds.stats(), ReturnTokenizer::default())
    }

    #[test]
    fn search_counts_forward_passes_and_breaks_ties_long() {
        let (_, mut model, _, stats, tok) = fork_agent_parts(1);
        model.max_timestep = 40;
        let params = init_model(&model, 1).unwrap();
        let agent = Agent {
            params: &params,
            model: &model,
            stats: &stats,
            tokenizer: &tok,
        };
        let obs = vec![0.0; model.obs_dim];
        let mut buffer = TraversedBuffer::new(20);
        for t in 0..19 {
            buffer.push(BufferEntry {
                obs: obs.clone(),
                action: Action::Continuous(vec![0.0]),
                return_token: 0.5,
                timestep: t,
            });
        }
        for (delta, passes) in [(8, 3), (2, 10)] {
            let lengths = build_search_space(20, delta, buffer.len() + 1);
            let r = estimate_max_returns(&agent, &buffer, &obs, 19, &lengths).unwrap();
            assert_eq!(r.forward_passes, passes);
            assert_eq!(r.rtilde_max(), r.rtilde.iter().copied().fold(f32::MIN, f32::max));
        }
        let one = estimate_max_returns(&agent, &buffer, &obs, 19, &[5]).unwrap();
        assert_eq!(one.chosen_w, 5);
        assert_eq!(argmax_longest(&[20, 12, 4], &[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax_longest(&[4, 12, 20], &[0.5, 0.5, 0.5]), 2);
        assert!(estimate_max_returns(&agent, &TraversedBuffer::new(20), &obs, 0, &[2]).is_err());
    }

    #[test]
    fn untrained_rollout_is_well_defined_and_seeded() {
        let (env, model, params, stats, tok) = fork_agent_parts(4);
        let agent = Agent {
            params: &params,
            model: &model,
            stats: &stats,
            tokenizer: &tok,
        };
        let cfg = InferenceConfig::default();
        let a = rollout(&env, &agent, &cfg, 12, 3, None).unwrap();
        let b = rollout(&env, &agent, &cfg, 12, 3, None).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.mean_return()));
        assert_eq!(a.decisions.len(), 24);
        assert!(a.decisions.iter().all(|d| d.forward_passes == build_search_space(20, 2, d.timestep + 1).len()));

        let fixed = InferenceConfig {
            fixed_w: Some(20),
            ..cfg.clone()
        };
        let f = rollout(&env, &agent, &fixed, 6, 3, Some(fork::START_B)).unwrap();
        assert!(f.decisions.iter().all(|d| d.chosen_w == d.timestep + 1 && d.forward_passes == 1));
        assert_eq!(f.length_histogram(20).iter().sum::<usize>(), 12);

        let degenerate = InferenceConfig { kappa: 0.0, ..cfg };
        let d = rollout(&env, &agent, &degenerate, 4, 0, None).unwrap();
        assert_eq!(d.returns.len(), 4);

        let chain = make_chain_env(9, 12, 0.3, 1.0).unwrap();
        assert!(rollout(&chain, &agent, &InferenceConfig::default(), 1, 0, None).is_err());
    }

    #[test]
    fn same_rng_same_action() {
        let env = make_chain_env(9, 12, 0.3, 1.0).unwrap();
        let ds = generate_dataset(&env, &PolicySpec::medium_replay(), 10, 0).unwrap();
        let mut model = ModelConfig::desk(env.obs_dim(), env.action_space().clone(), env.horizon());
        model.embed_dim = 8;
        model.n_layers = 1;
        model.n_heads = 1;
        let params = init_model(&model, 0).unwrap();
        let stats = ds.stats();
        let tok = ReturnTokenizer::default();
        let agent = Agent {
            params: &params,
            model: &model,
            stats: &stats,
            tokenizer: &tok,
        };
        let obs = stats.normalize_obs(&env.observe(4));
        let buffer = TraversedBuffer::new(20);
        let cfg = InferenceConfig::default();
        let pick = |seed| select_action(&agent, &buffer, &obs, 0, &cfg, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(pick(7), pick(7));
        assert!(env.action_space().contains(&pick(7).action));
    }

    #[test]
    fn heuristic_and_fixed_candidates() {
        let mut buffer = TraversedBuffer::new(20);
        for t in 0..15 {
            buffer.push(BufferEntry {
                obs: vec![0.0],
                action: Action::Discrete(0),
                return_token: 0.0,
                timestep: t,
            });
        }
        let cfg = InferenceConfig {
            heuristic: true,
            ..InferenceConfig::default()
        };
        assert_eq!(candidate_lengths(&cfg, &buffer, None), build_search_space(20, 2, 16));
        assert_eq!(candidate_lengths(&cfg, &buffer, Some(10)), (6..=14).collect::<Vec<_>>());
        let fixed = InferenceConfig {
            fixed_w: Some(20),
            ..InferenceConfig::default()
        };
        assert_eq!(candidate_lengths(&fixed, &buffer, Some(3)), vec![16]);
        assert_eq!(cfg.local_delta(), 4);
    }
}
