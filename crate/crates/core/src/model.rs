//! The EDT network.
//!
//! Each timestep contributes three tokens in the order (observation, return,
//! action). Every token is a linear embedding of its input plus a learned
//! embedding of the global environment timestep. A stack of pre-norm causal
//! transformer blocks follows, then four heads:
//!
//! - return-bin logits and the scalar maximum-return estimate read the
//!   observation-token state,
//! - the action head reads the return-token state,
//! - the next-observation head reads the observation- and action-token
//!   states of the same step, concatenated.
//!
//! Left padding is never materialized: padded positions attend nothing and
//! are attended by nothing, so the forward pass runs over the valid suffix
//! only and padded output rows are zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TokenWindow;
use crate::envs::{Action, ActionSpace};
use crate::numerics::{BoundParams, Graph, ParamStore, Scalar, Tensor, Var};
use crate::{ConfigError, Error};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const MLP_RATIO: usize = 4;

/// Tokens per timestep.
pub const TOKENS_PER_STEP: usize = 3;
pub const OBS_SLOT: usize = 0;
pub const RETURN_SLOT: usize = 1;
pub const ACTION_SLOT: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Number of distinct global timesteps the embedding table covers.
    pub max_timestep: usize,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub n_return_bins: usize,
    /// Maximum history length T.
    pub context_len: usize,
}

impl ModelConfig {
    /// Desk-scale shape: 3 layers, width 64, 4 heads, 60 return bins, T = 20.
    pub fn desk(obs_dim: usize, action_space: ActionSpace, max_timestep: usize) -> Self {
        Self {
            embed_dim: 64,
            n_layers: 3,
            n_heads: 4,
            max_timestep,
            obs_dim,
            action_space,
            n_return_bins: 60,
            context_len: 20,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(ConfigError::invalid("model.embed_dim", "must be a positive multiple of n_heads"));
        }
        if self.context_len == 0 {
            return Err(ConfigError::invalid("model.context_len", "must be >= 1"));
        }
        if self.max_timestep == 0 || self.obs_dim == 0 || self.action_space.width() == 0 {
            return Err(ConfigError::invalid("model", "timestep, observation and action sizes must be positive"));
        }
        if self.n_return_bins < 2 {
            return Err(ConfigError::invalid("model.n_return_bins", "must be >= 2"));
        }
        Ok(())
    }
}

/// Visibility of return tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    StandardCausal,
    /// Only the first valid return token of the window is visible to later
    /// timesteps; every other return token is visible to its own step only.
    ReturnMasked,
}

/// Allowed (query, key) pairs over the `3T` tokens of a window, row-major.
pub fn build_attention_mask(t_max: usize, valid: &[bool], mode: AttentionMode) -> Vec<bool> {
    assert_eq!(valid.len(), t_max, "padding mask length");
    let n = TOKENS_PER_STEP * t_max;
    let first_valid = valid.iter().position(|&v| v);
    let mut mask = vec![false; n * n];
    for q in 0..n {
        let qs = q / TOKENS_PER_STEP;
        if !valid[qs] {
            continue;
        }
        for k in 0..=q {
            let ks = k / TOKENS_PER_STEP;
            if !valid[ks] {
                continue;
            }
            let is_return = k % TOKENS_PER_STEP == RETURN_SLOT;
            let allowed = match mode {
                AttentionMode::StandardCausal => true,
                AttentionMode::ReturnMasked => !is_return || ks == qs || Some(ks) == first_valid,
            };
            mask[q * n + k] = allowed;
        }
    }
    mask
}

/// Closed-form parameter count.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.embed_dim;
    let h = MLP_RATIO * d;
    let embed = cfg.max_timestep * d
        + (cfg.obs_dim * d + d)
        + (d + d)
        + match cfg.action_space {
            ActionSpace::Continuous { dim } => dim * d + d,
            ActionSpace::Discrete { n } => n * d,
        }
        + 2 * d;
    let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
    let aw = cfg.action_space.width();
    let heads = (d * cfg.n_return_bins + cfg.n_return_bins) + (d + 1) + (d * aw + aw) + (2 * d * cfg.obs_dim + cfg.obs_dim);
    embed + cfg.n_layers * block + 2 * d + heads
}

/// Parameter names, shapes and init rule, in creation order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let h = MLP_RATIO * d;
    let mut out: Vec<(String, Vec<usize>, Init)> = vec![
        ("embed.timestep".into(), vec![cfg.max_timestep, d], Init::Normal),
        ("embed.obs.w".into(), vec![cfg.obs_dim, d], Init::Normal),
        ("embed.obs.b".into(), vec![d], Init::Zero),
        ("embed.return.w".into(), vec![1, d], Init::Normal),
        ("embed.return.b".into(), vec![d], Init::Zero),
    ];
    match cfg.action_space {
        ActionSpace::Continuous { dim } => {
            out.push(("embed.action.w".into(), vec![dim, d], Init::Normal));
            out.push(("embed.action.b".into(), vec![d], Init::Zero));
        }
        ActionSpace::Discrete { n } => out.push(("embed.action.table".into(), vec![n, d], Init::Normal)),
    }
    out.push(("embed.ln.g".into(), vec![d], Init::One));
    out.push(("embed.ln.b".into(), vec![d], Init::Zero));
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("block{l}.{s}");
        out.push((p("ln1.g"), vec![d], Init::One));
        out.push((p("ln1.b"), vec![d], Init::Zero));
        for w in ["q", "k", "v", "o"] {
            out.push((p(&format!("attn.w{w}")), vec![d, d], Init::Normal));
            out.push((p(&format!("attn.b{w}")), vec![d], Init::Zero));
        }
        out.push((p("ln2.g"), vec![d], Init::One));
        out.push((p("ln2.b"), vec![d], Init::Zero));
        out.push((p("mlp.w1"), vec![d, h], Init::Normal));
        out.push((p("mlp.b1"), vec![h], Init::Zero));
        out.push((p("mlp.w2"), vec![h, d], Init::Normal));
        out.push((p("mlp.b2"), vec![d], Init::Zero));
    }
    let aw = cfg.action_space.width();
    out.extend([
        ("ln_f.g".into(), vec![d], Init::One),
        ("ln_f.b".into(), vec![d], Init::Zero),
        ("head.return.w".into(), vec![d, cfg.n_return_bins], Init::Normal),
        ("head.return.b".into(), vec![cfg.n_return_bins], Init::Zero),
        ("head.rtilde.w".into(), vec![d, 1], Init::Normal),
        ("head.rtilde.b".into(), vec![1], Init::Zero),
        ("head.action.w".into(), vec![d, aw], Init::Normal),
        ("head.action.b".into(), vec![aw], Init::Zero),
        ("head.next_obs.w".into(), vec![2 * d, cfg.obs_dim], Init::Normal),
        ("head.next_obs.b".into(), vec![cfg.obs_dim], Init::Zero),
    ]);
    out
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

/// Deterministic initialization: N(0, 0.02) matrices, zero biases, unit gains.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng) as f32).collect(),
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        store
            .insert(name, Tensor::new(shape, data).expect("layout shape"))
            .expect("layout names are unique");
    }
    Ok(store)
}

/// Checks that `params` has exactly the layout of `cfg`.
pub fn check_layout<F: Scalar>(cfg: &ModelConfig, params: &ParamStore<F>) -> Result<(), ConfigError> {
    let expected = layout(cfg);
    if expected.len() != params.len() {
        return Err(ConfigError::invalid("checkpoint", "parameter set does not match model config"));
    }
    for (name, shape, _) in expected {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            _ => return Err(ConfigError::invalid("checkpoint", format!("parameter `{name}` missing or mis-shaped"))),
        }
    }
    Ok(())
}

/// Where one window's valid steps sit in a batched forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpan {
    /// First stacked row of this window.
    pub offset: usize,
    pub n_valid: usize,
    pub n_pad: usize,
}

/// Graph handles for the valid steps of a batch of windows, stacked in
/// window order.
#[derive(Clone, Debug)]
pub struct OutputVars {
    /// `[n, n_bins]`
    pub return_logits: Var,
    /// `[n, 1]`
    pub rtilde: Var,
    /// `[n, act_width]`, tanh-squashed for continuous actions.
    pub action: Var,
    /// `[n, obs_dim]`
    pub next_obs: Var,
    pub spans: Vec<WindowSpan>,
}

impl OutputVars {
    /// Total stacked rows.
    pub fn rows(&self) -> usize {
        self.spans.iter().map(|s| s.n_valid).sum()
    }
}

/// Per-position outputs for a whole window; padded rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs<F: Scalar = f32> {
    pub return_logits: Tensor<F>,
    pub rtilde: Tensor<F>,
    pub action: Tensor<F>,
    pub next_obs: Tensor<F>,
}

fn linear<'a, F: Scalar>(g: &mut Graph<'a, F>, p: &BoundParams, x: Var, prefix: &str) -> Var {
    let y = g.matmul(x, p.var(&format!("{prefix}.w")));
    g.add_row(y, p.var(&format!("{prefix}.b")))
}

/// Records the forward pass over the valid suffix of `window`.
pub fn forward_graph<'a, F: Scalar>(
    g: &mut Graph<'a, F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    window: &TokenWindow,
    mode: AttentionMode,
) -> Result<OutputVars, Error> {
    forward_batch_graph(g, p, cfg, std::slice::from_ref(window), mode)
}

fn check_window(cfg: &ModelConfig, window: &TokenWindow) -> Result<usize, ConfigError> {
    let n_pad = window.n_pad();
    if n_pad == window.len() {
        return Err(ConfigError::invalid("window", "no valid positions"));
    }
    if window.len() > cfg.context_len {
        return Err(ConfigError::invalid("window", format!("length {} exceeds T = {}", window.len(), cfg.context_len)));
    }
    if !window.valid[n_pad..].iter().all(|&v| v) {
        return Err(ConfigError::invalid("window.valid", "padding must be a left prefix"));
    }
    if window.obs[n_pad..].iter().any(|o| o.len() != cfg.obs_dim) {
        return Err(ConfigError::invalid("window.obs", "observation width does not match the model"));
    }
    if let Some(&t) = window.timesteps[n_pad..].iter().find(|&&t| t >= cfg.max_timestep) {
        return Err(ConfigError::invalid("window.timesteps", format!("timestep {t} beyond max_timestep {}", cfg.max_timestep)));
    }
    Ok(n_pad)
}

/// Records the forward pass over the valid suffixes of several windows.
/// Position-wise layers run on all windows' tokens at once; attention stays
/// within each window.
pub fn forward_batch_graph<'a, F: Scalar>(
    g: &mut Graph<'a, F>,
    p: &BoundParams,
    cfg: &ModelConfig,
    windows: &[TokenWindow],
    mode: AttentionMode,
) -> Result<OutputVars, Error> {
    if windows.is_empty() {
        return Err(ConfigError::invalid("windows", "empty batch").into());
    }
    let mut spans = Vec::with_capacity(windows.len());
    let mut total = 0;
    for w in windows {
        let n_pad = check_window(cfg, w)?;
        let n_valid = w.len() - n_pad;
        spans.push(WindowSpan {
            offset: total,
            n_valid,
            n_pad,
        });
        total += n_valid;
    }
    let n = total;
    let d = cfg.embed_dim;
    let valid = |w: &'_ TokenWindow, s: &WindowSpan| s.n_pad..w.len();

    let mut obs = Vec::with_capacity(n * cfg.obs_dim);
    let mut rets = Vec::with_capacity(n);
    let mut timesteps = Vec::with_capacity(n);
    for (w, s) in windows.iter().zip(&spans) {
        for o in &w.obs[valid(w, s)] {
            obs.extend(o.iter().map(|&x| F::of(x as f64)));
        }
        rets.extend(w.returns[valid(w, s)].iter().map(|&r| F::of(r as f64)));
        timesteps.extend_from_slice(&w.timesteps[valid(w, s)]);
    }

    let time = g.gather(p.var("embed.timestep"), &timesteps);
    let obs_in = g.constant(Tensor::new(vec![n, cfg.obs_dim], obs)?);
    let o = linear(g, p, obs_in, "embed.obs");
    let o = g.add(o, time);
    let ret_in = g.constant(Tensor::new(vec![n, 1], rets)?);
    let r = linear(g, p, ret_in, "embed.return");
    let r = g.add(r, time);
    let a = match cfg.action_space {
        ActionSpace::Continuous { dim } => {
            let mut acts = Vec::with_capacity(n * dim);
            for (w, s) in windows.iter().zip(&spans) {
                for act in &w.actions[valid(w, s)] {
                    match act {
                        Action::Continuous(v) if v.len() == dim => acts.extend(v.iter().map(|&x| F::of(x as f64))),
                        _ => return Err(ConfigError::invalid("window.actions", "expected continuous actions").into()),
                    }
                }
            }
            let a_in = g.constant(Tensor::new(vec![n, dim], acts)?);
            linear(g, p, a_in, "embed.action")
        }
        ActionSpace::Discrete { n: arity } => {
            let mut idx = Vec::with_capacity(n);
            for (w, s) in windows.iter().zip(&spans) {
                for act in &w.actions[valid(w, s)] {
                    match *act {
                        Action::Discrete(i) if i < arity => idx.push(i),
                        _ => return Err(ConfigError::invalid("window.actions", "expected discrete actions in range").into()),
                    }
                }
            }
            g.gather(p.var("embed.action.table"), &idx)
        }
    };
    let a = g.add(a, time);

    // interleave to (o, R, a) per step; row 3i + k is slot k of stacked step i
    let stacked = g.concat_rows(&[o, r, a]);
    let order: Vec<usize> = (0..n)
        .flat_map(|i| (0..TOKENS_PER_STEP).map(move |k| k * n + i))
        .collect();
    let x = g.gather(stacked, &order);
    let mut x = g.layer_norm(x, p.var("embed.ln.g"), p.var("embed.ln.b"), LN_EPS);

    let mut masks: Vec<Option<Vec<bool>>> = vec![None; cfg.context_len + 1];
    for s in &spans {
        masks[s.n_valid].get_or_insert_with(|| build_attention_mask(s.n_valid, &vec![true; s.n_valid], mode));
    }
    let dh = d / cfg.n_heads;
    let att_scale = F::of(1.0 / (dh as f64).sqrt());
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("block{l}.{s}");
        let hn = g.layer_norm(x, p.var(&name("ln1.g")), p.var(&name("ln1.b")), LN_EPS);
        let q = linear_named(g, p, hn, &name("attn.wq"), &name("attn.bq"));
        let k = linear_named(g, p, hn, &name("attn.wk"), &name("attn.bk"));
        let v = linear_named(g, p, hn, &name("attn.wv"), &name("attn.bv"));
        let mut per_window = Vec::with_capacity(spans.len());
        for s in &spans {
            let rows = TOKENS_PER_STEP * s.offset..TOKENS_PER_STEP * (s.offset + s.n_valid);
            let mask = masks[s.n_valid].as_deref();
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = g.slice_block(q, rows.clone(), cols.clone());
                let kh = g.slice_block(k, rows.clone(), cols.clone());
                let vh = g.slice_block(v, rows.clone(), cols);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, att_scale);
                let att = g.softmax(scores, mask);
                heads.push(g.matmul(att, vh));
            }
            per_window.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) });
        }
        let merged = if per_window.len() == 1 { per_window[0] } else { g.concat_rows(&per_window) };
        let proj = linear_named(g, p, merged, &name("attn.wo"), &name("attn.bo"));
        x = g.add(x, proj);

        let hn = g.layer_norm(x, p.var(&name("ln2.g")), p.var(&name("ln2.b")), LN_EPS);
        let h1 = linear_named(g, p, hn, &name("mlp.w1"), &name("mlp.b1"));
        let h1 = g.gelu(h1);
        let h2 = linear_named(g, p, h1, &name("mlp.w2"), &name("mlp.b2"));
        x = g.add(x, h2);
    }
    let x = g.layer_norm(x, p.var("ln_f.g"), p.var("ln_f.b"), LN_EPS);

    let slot = |k: usize| (0..n).map(|i| TOKENS_PER_STEP * i + k).collect::<Vec<_>>();
    let h_obs = g.gather(x, &slot(OBS_SLOT));
    let h_ret = g.gather(x, &slot(RETURN_SLOT));
    let h_act = g.gather(x, &slot(ACTION_SLOT));

    let return_logits = linear(g, p, h_obs, "head.return");
    let rtilde = linear(g, p, h_obs, "head.rtilde");
    let action = linear(g, p, h_ret, "head.action");
    let action = match cfg.action_space {
        ActionSpace::Continuous { .. } => g.tanh(action),
        ActionSpace::Discrete { .. } => action,
    };
    let oa = g.concat_cols(&[h_obs, h_act]);
    let next_obs = linear(g, p, oa, "head.next_obs");
    g.check()?;
    Ok(OutputVars {
        return_logits,
        rtilde,
        action,
        next_obs,
        spans,
    })
}

fn linear_named<'a, F: Scalar>(g: &mut Graph<'a, F>, p: &BoundParams, x: Var, w: &str, b: &str) -> Var {
    let y = g.matmul(x, p.var(w));
    g.add_row(y, p.var(b))
}

fn pad_rows<F: Scalar>(t: &Tensor<F>, n_pad: usize) -> Tensor<F> {
    let (m, c) = t.dims2();
    let mut data = vec![F::zero(); n_pad * c];
    data.extend_from_slice(t.data());
    Tensor::new(vec![n_pad + m, c], data).expect("padded shape")
}

/// Evaluates the network on one window.
pub fn forward<F: Scalar>(
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    window: &TokenWindow,
    mode: AttentionMode,
) -> Result<ModelOutputs<F>, Error> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = forward_graph(&mut g, &bound, cfg, window, mode)?;
    let n_pad = out.spans[0].n_pad;
    let rt = pad_rows(g.value(out.rtilde), n_pad);
    let rtilde = Tensor::new(vec![window.len()], rt.into_data())?;
    Ok(ModelOutputs {
        return_logits: pad_rows(g.value(out.return_logits), n_pad),
        rtilde,
        action: pad_rows(g.value(out.action), n_pad),
        next_obs: pad_rows(g.value(out.next_obs), n_pad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ActionSpace;
    use rand::Rng;

    fn tiny(space: ActionSpace, t: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            n_layers: 2,
            n_heads: 2,
            max_timestep: 40,
            obs_dim: 3,
            action_space: space,
            n_return_bins: 7,
            context_len: t,
        }
    }

    fn random_window(cfg: &ModelConfig, n_valid: usize, t0: usize, rng: &mut impl Rng) -> TokenWindow {
        let obs = (0..n_valid).map(|_| (0..cfg.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let rets = (0..n_valid).map(|_| rng.random_range(0.0..1.0)).collect();
        let acts = (0..n_valid)
            .map(|_| match cfg.action_space {
                ActionSpace::Continuous { dim } => Action::Continuous((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
                ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..n)),
            })
            .collect();
        TokenWindow::from_valid(cfg.context_len, obs, rets, acts, (t0..t0 + n_valid).collect(), &cfg.action_space, 0, t0)
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        for space in [ActionSpace::Continuous { dim: 2 }, ActionSpace::Discrete { n: 3 }] {
            let cfg = tiny(space, 5);
            let a = init_model(&cfg, 9).unwrap();
            let b = init_model(&cfg, 9).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, init_model(&cfg, 10).unwrap());
            assert_eq!(a.numel(), parameter_count(&cfg));
        }
        let desk = ModelConfig::desk(5, ActionSpace::Continuous { dim: 1 }, 2);
        assert_eq!(init_model(&desk, 0).unwrap().numel(), parameter_count(&desk));
    }

    #[test]
    fn bad_head_split_is_rejected() {
        let mut cfg = tiny(ActionSpace::Discrete { n: 2 }, 4);
        cfg.embed_dim = 63;
        cfg.n_heads = 8;
        assert!(init_model(&cfg, 0).is_err());
    }

    #[test]
    fn single_step_mask_is_plain_causal() {
        let expected = [true, false, false, true, true, false, true, true, true];
        for mode in [AttentionMode::StandardCausal, AttentionMode::ReturnMasked] {
            assert_eq!(build_attention_mask(1, &[true], mode), expected);
        }
    }

    #[test]
    fn return_masking_rule() {
        let m = build_attention_mask(3, &[true; 3], AttentionMode::ReturnMasked);
        let n = 9;
        let q = 6; // obs token of step 3
        assert!(m[q * n + 1], "first return token visible");
        assert!(!m[q * n + 4], "step-2 return token hidden");
        assert!(!m[q * n + 7], "own return token is later");
        assert!(m[7 * n + 7] && m[8 * n + 7], "own step sees its return token");
        assert!(!m[8 * n + 4]);
    }

    #[test]
    fn mask_is_causal_and_respects_padding_exhaustively() {
        for t in 1..=5 {
            for pad in 0..t {
                let valid: Vec<bool> = (0..t).map(|i| i >= pad).collect();
                for mode in [AttentionMode::StandardCausal, AttentionMode::ReturnMasked] {
                    let m = build_attention_mask(t, &valid, mode);
                    let n = 3 * t;
                    for q in 0..n {
                        for k in 0..n {
                            if m[q * n + k] {
                                assert!(k <= q);
                                assert!(valid[q / 3] && valid[k / 3]);
                            }
                        }
                    }
                    // the padded mask restricted to valid tokens equals the compact one
                    let compact = build_attention_mask(t - pad, &vec![true; t - pad], mode);
                    let c = 3 * (t - pad);
                    for q in 0..c {
                        for k in 0..c {
                            assert_eq!(compact[q * c + k], m[(q + 3 * pad) * n + k + 3 * pad]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_shapes_and_ranges() {
        let cfg = tiny(ActionSpace::Continuous { dim: 2 }, 6);
        let params = init_model(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_window(&cfg, 4, 3, &mut rng);
        let out = forward(&params, &cfg, &w, AttentionMode::ReturnMasked).unwrap();
        assert_eq!(out.return_logits.shape(), &[6, 7]);
        assert_eq!(out.rtilde.shape(), &[6]);
        assert_eq!(out.action.shape(), &[6, 2]);
        assert_eq!(out.next_obs.shape(), &[6, 3]);
        assert!(out.action.data().iter().all(|a| a.abs() < 1.0));
        for i in 2..6 {
            let row = out.return_logits.row(i);
            let lse = crate::numerics::log_sum_exp(row);
            let total: f32 = row.iter().map(|x| (x - lse).exp()).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
        assert!(out.rtilde.data()[..2].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_mismatched_windows() {
        let cfg = tiny(ActionSpace::Discrete { n: 2 }, 4);
        let params = init_model(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = random_window(&cfg, 2, 0, &mut rng);
        w.actions[3] = Action::Continuous(vec![0.5]);
        assert!(forward(&params, &cfg, &w, AttentionMode::ReturnMasked).is_err());
        let mut w = random_window(&cfg, 2, 39, &mut rng);
        w.actions[3] = Action::Discrete(1);
        assert!(forward(&params, &cfg, &w, AttentionMode::ReturnMasked).is_err());
    }
}
