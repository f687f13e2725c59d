//! The training objective, the optimization loop and checkpoints.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_training_window, DataStats, Dataset, ReturnTokenizer, TokenWindow};
use crate::envs::{Action, ActionKind};
use crate::model::{forward_batch_graph, init_model, AttentionMode, ModelConfig, ModelOutputs, OutputVars, WindowSpan};
use crate::numerics::{
    adamw_update, clip_global_norm, expectile_weight, AdamW, BoundParams, Gradients, Graph, Param, ParamStore, Scalar, Tensor,
    Var,
};
use crate::{ConfigError, Error};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLossKind {
    Mse,
    Ce,
}

impl ActionLossKind {
    pub fn for_kind(kind: ActionKind) -> Self {
        match kind {
            ActionKind::Continuous => ActionLossKind::Mse,
            ActionKind::Discrete => ActionLossKind::Ce,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Expectile level of the maximum-return loss.
    pub alpha: f64,
    /// Return cross-entropy coefficient.
    pub c_r: f64,
    /// Maximum-return loss coefficient.
    pub max_coeff: f64,
    /// `None` picks the kind matching the dataset's actions.
    pub action_loss: Option<ActionLossKind>,
    pub optimizer: AdamW,
    /// 64 rather than 256 to fit a CPU budget.
    pub batch_size: usize,
    pub n_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between evaluation callbacks; 0 disables them.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            c_r: 0.001,
            max_coeff: 0.5,
            action_loss: None,
            optimizer: AdamW::default(),
            batch_size: 64,
            n_steps: 2000,
            grad_clip: 0.25,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError::invalid("train.alpha", "must lie in (0, 1)"));
        }
        if self.c_r < 0.0 || self.max_coeff < 0.0 {
            return Err(ConfigError::invalid("train.c_r", "loss coefficients must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::invalid("train.batch_size", "must be >= 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(ConfigError::invalid("train.grad_clip", "must be > 0"));
        }
        if self.optimizer.lr < 0.0 || self.optimizer.weight_decay < 0.0 {
            return Err(ConfigError::invalid("train.optimizer", "lr and weight_decay must be >= 0"));
        }
        Ok(())
    }

    /// Action-loss kind for a dataset, rejecting an explicit mismatch.
    pub fn resolve_action_loss(&self, kind: ActionKind) -> Result<ActionLossKind, ConfigError> {
        let natural = ActionLossKind::for_kind(kind);
        match self.action_loss {
            Some(k) if k != natural => Err(ConfigError::invalid(
                "train.action_loss",
                format!("{k:?} does not fit {kind:?} actions"),
            )),
            _ => Ok(natural),
        }
    }

    /// Weight of the action term: 1 for regression, `10 c_r` for
    /// cross-entropy.
    pub fn action_weight(&self, kind: ActionLossKind) -> f64 {
        match kind {
            ActionLossKind::Mse => 1.0,
            ActionLossKind::Ce => 10.0 * self.c_r,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_return: f64,
    pub l_observation: f64,
    pub l_action: f64,
    pub l_max: f64,
}

impl LossBreakdown {
    /// Combines components with the configured coefficients.
    pub fn combine(l_return: f64, l_observation: f64, l_action: f64, l_max: f64, cfg: &TrainConfig, kind: ActionLossKind) -> Self {
        Self {
            total: cfg.c_r * l_return + l_observation + cfg.action_weight(kind) * l_action + cfg.max_coeff * l_max,
            l_return,
            l_observation,
            l_action,
            l_max,
        }
    }
}

/// Mean asymmetric squared loss over `(pred, target)` pairs, residual
/// `target - pred`.
pub fn expectile_loss(pred: &[f64], target: &[f64], alpha: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| expectile_weight(t - p, alpha) * (t - p) * (t - p))
        .sum();
    s / pred.len() as f64
}

/// Scalar `m` minimizing `expectile_loss([m; n], samples, alpha)`.
///
/// The loss is a convex piecewise quadratic, so Newton steps land exactly on
/// the minimizer of the current piece; iteration stops once the piece (the
/// set of samples above `m`) no longer changes.
pub fn sample_expectile(samples: &[f64], alpha: f64) -> f64 {
    assert!(!samples.is_empty());
    let mut m = samples.iter().sum::<f64>() / samples.len() as f64;
    for _ in 0..(samples.len() + 2) {
        let (mut num, mut den) = (0.0, 0.0);
        for &x in samples {
            let w = expectile_weight(x - m, alpha);
            num += w * x;
            den += w;
        }
        let next = num / den;
        if next == m {
            break;
        }
        m = next;
    }
    m
}

/// Per-batch normalizers: each component is a mean over its valid positions
/// across the whole batch.
#[derive(Clone, Copy, Debug)]
struct Counts {
    positions: usize,
    next_obs: usize,
}

impl Counts {
    fn of(windows: &[TokenWindow]) -> Self {
        let positions = windows.iter().map(TokenWindow::n_valid).sum();
        let next_obs = windows.iter().map(|w| w.n_valid().saturating_sub(1)).sum();
        Self { positions, next_obs }
    }
}

fn inv<F: Scalar>(n: usize) -> F {
    if n == 0 {
        F::zero()
    } else {
        F::of(1.0 / n as f64)
    }
}

/// Loss components recorded on a graph.
#[derive(Clone, Copy, Debug)]
struct LossVars {
    total: Var,
    l_return: Var,
    l_observation: Var,
    l_action: Var,
    l_max: Var,
}

impl LossVars {
    fn values<F: Scalar>(&self, g: &Graph<'_, F>) -> [F; 5] {
        [self.total, self.l_return, self.l_observation, self.l_action, self.l_max].map(|v| g.value(v).item())
    }
}

/// Records the loss of stacked outputs for `windows`, normalized by `counts`
/// (which may cover a larger batch).
fn stacked_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    out: &OutputVars,
    windows: &[TokenWindow],
    tok: &ReturnTokenizer,
    cfg: &TrainConfig,
    kind: ActionLossKind,
    counts: Counts,
) -> Result<LossVars, Error> {
    let n = out.rows();
    let obs_dim = windows[0].obs[0].len();
    let pos_w = vec![inv::<F>(counts.positions); n];
    let mut bins = Vec::with_capacity(n);
    let mut returns = Vec::with_capacity(n);
    let mut next_obs = Vec::with_capacity(n * obs_dim);
    let mut obs_w = Vec::with_capacity(n);
    let mut act_f = Vec::new();
    let mut act_i = Vec::new();
    for (w, span) in windows.iter().zip(&out.spans) {
        let rows = span.n_pad..w.len();
        bins.extend(w.returns[rows.clone()].iter().map(|&r| tok.tokenize(r)));
        returns.extend(w.returns[rows.clone()].iter().map(|&r| F::of(r as f64)));
        // the last step has no successor inside the window
        for i in rows.clone() {
            if i + 1 < w.len() {
                next_obs.extend(w.obs[i + 1].iter().map(|&x| F::of(x as f64)));
                obs_w.push(inv::<F>(counts.next_obs));
            } else {
                next_obs.extend(std::iter::repeat_n(F::zero(), obs_dim));
                obs_w.push(F::zero());
            }
        }
        for a in &w.actions[rows] {
            match (kind, a) {
                (ActionLossKind::Mse, Action::Continuous(v)) => act_f.extend(v.iter().map(|&x| F::of(x as f64))),
                (ActionLossKind::Ce, &Action::Discrete(i)) => act_i.push(i),
                _ => return Err(ConfigError::invalid("train.action_loss", "does not match the window's actions").into()),
            }
        }
    }

    let l_return = g.cross_entropy(out.return_logits, &bins, &pos_w);
    let l_observation = g.squared_error(out.next_obs, &next_obs, &obs_w);
    let l_action = match kind {
        ActionLossKind::Mse => {
            // mean over positions and action dimensions
            let dim = act_f.len() / n;
            let w: Vec<F> = pos_w.iter().map(|&x| x / F::of(dim as f64)).collect();
            g.squared_error(out.action, &act_f, &w)
        }
        ActionLossKind::Ce => g.cross_entropy(out.action, &act_i, &pos_w),
    };
    let l_max = g.expectile(out.rtilde, &returns, &pos_w, F::of(cfg.alpha));

    let parts = [
        g.scale(l_return, F::of(cfg.c_r)),
        l_observation,
        g.scale(l_action, F::of(cfg.action_weight(kind))),
        g.scale(l_max, F::of(cfg.max_coeff)),
    ];
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p);
    }
    Ok(LossVars {
        total,
        l_return,
        l_observation,
        l_action,
        l_max,
    })
}

/// Loss of one window given the model outputs for it.
pub fn edt_loss<F: Scalar>(
    outputs: &ModelOutputs<F>,
    window: &TokenWindow,
    tok: &ReturnTokenizer,
    cfg: &TrainConfig,
    kind: ActionKind,
) -> Result<LossBreakdown, Error> {
    let kind = cfg.resolve_action_loss(kind)?;
    let n_pad = window.n_pad();
    let slice = |t: &Tensor<F>| -> Result<Tensor<F>, Error> {
        let (_, c) = t.dims2();
        Ok(Tensor::new(vec![window.len() - n_pad, c], t.data()[n_pad * c..].to_vec())?)
    };
    let mut g = Graph::new();
    let out = OutputVars {
        return_logits: g.constant(slice(&outputs.return_logits)?),
        rtilde: g.constant(slice(&outputs.rtilde.clone().reshape(vec![window.len(), 1])?)?),
        action: g.constant(slice(&outputs.action)?),
        next_obs: g.constant(slice(&outputs.next_obs)?),
        spans: vec![WindowSpan {
            offset: 0,
            n_valid: window.n_valid(),
            n_pad,
        }],
    };
    let windows = std::slice::from_ref(window);
    let lv = stacked_loss(&mut g, &out, windows, tok, cfg, kind, Counts::of(windows))?;
    g.check()?;
    let [total, l_return, l_observation, l_action, l_max] = lv.values(&g).map(Scalar::as_f64);
    Ok(LossBreakdown {
        total,
        l_return,
        l_observation,
        l_action,
        l_max,
    })
}

/// Records the batch-mean loss of `windows` on `g`; returns the total.
pub fn batch_loss_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    params: &BoundParams,
    model: &ModelConfig,
    windows: &[TokenWindow],
    tok: &ReturnTokenizer,
    cfg: &TrainConfig,
    kind: ActionLossKind,
) -> Result<Var, Error> {
    let out = forward_batch_graph(g, params, model, windows, AttentionMode::ReturnMasked)?;
    Ok(stacked_loss(g, &out, windows, tok, cfg, kind, Counts::of(windows))?.total)
}

/// Windows sharing one graph in [`batch_gradients`]. Fixed, so the
/// floating-point reduction order never depends on the thread count.
const CHUNK: usize = 16;

/// Batch loss and parameter gradients. Chunks of windows are evaluated in
/// parallel and reduced in batch order.
pub fn batch_gradients<F: Scalar>(
    params: &ParamStore<F>,
    model: &ModelConfig,
    windows: &[TokenWindow],
    tok: &ReturnTokenizer,
    cfg: &TrainConfig,
    kind: ActionLossKind,
) -> Result<(LossBreakdown, Gradients<F>), Error> {
    let counts = Counts::of(windows);
    let per_chunk: Vec<Result<([F; 5], Gradients<F>), Error>> = windows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let out = forward_batch_graph(&mut g, &bound, model, chunk, AttentionMode::ReturnMasked)?;
            let lv = stacked_loss(&mut g, &out, chunk, tok, cfg, kind, counts)?;
            g.check()?;
            let vals = lv.values(&g);
            let mut ng = g.backward(lv.total)?;
            Ok((vals, bound.gradients(params, &mut ng)))
        })
        .collect();

    let mut sums = [F::zero(); 5];
    let mut grads: Option<Gradients<F>> = None;
    for r in per_chunk {
        let (vals, gc) = r?;
        for (s, v) in sums.iter_mut().zip(vals) {
            *s = *s + v;
        }
        match &mut grads {
            None => grads = Some(gc),
            Some(acc) => {
                for (k, t) in gc {
                    acc.get_mut(&k).expect("same parameter set").add_assign(&t);
                }
            }
        }
    }
    let [total, l_return, l_observation, l_action, l_max] = sums.map(Scalar::as_f64);
    Ok((
        LossBreakdown {
            total,
            l_return,
            l_observation,
            l_action,
            l_max,
        },
        grads.ok_or_else(|| ConfigError::invalid("batch", "empty batch"))?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,total,l_return,l_observation,l_action,l_max,grad_norm";

/// CSV metrics log.
pub fn write_metrics_csv(rows: &[MetricsRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        let l = &r.loss;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, l.total, l.l_return, l.l_observation, l.l_action, l.l_max, r.grad_norm
        )?;
    }
    Ok(())
}

/// Training sampler position, so resumed runs continue the same stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (128-bit).
    pub word_pos: String,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("rng word position is not an integer".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Trained parameters plus everything needed to run or resume them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stats: DataStats,
    pub tokenizer: ReturnTokenizer,
    pub rng: RngState,
    pub step: usize,
    pub params: ParamStore<f32>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricsRow>,
}

/// Fresh checkpoint at initialization.
pub fn initial_checkpoint(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<Checkpoint, Error> {
    cfg.validate()?;
    model.validate()?;
    cfg.resolve_action_loss(ds.action_space.kind())?;
    if model.obs_dim != ds.obs_dim() || model.action_space != ds.action_space {
        return Err(ConfigError::invalid("model", "observation or action space does not match the dataset").into());
    }
    let max_steps = ds.trajectories.iter().map(|t| t.steps()).max().unwrap_or(0);
    if max_steps > model.max_timestep {
        return Err(ConfigError::invalid("model.max_timestep", format!("dataset has episodes of {max_steps} steps")).into());
    }
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(Checkpoint {
        model: model.clone(),
        train: cfg.clone(),
        stats: ds.stats(),
        tokenizer: ReturnTokenizer::new(model.n_return_bins, 0.0, 1.0)?,
        rng: RngState::capture(cfg.seed, &rng),
        step: 0,
        params: init_model(model, cfg.seed)?,
    })
}

/// Trains from scratch for `cfg.n_steps` steps.
pub fn train(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome, Error> {
    let ckpt = initial_checkpoint(ds, model, cfg)?;
    resume(ds, ckpt, cfg.n_steps, |_, _| {})
}

/// Continues `ckpt` for `steps` more updates with its stored configuration.
/// `on_eval` runs every `eval_every` steps.
pub fn resume(
    ds: &Dataset,
    mut ckpt: Checkpoint,
    steps: usize,
    mut on_eval: impl FnMut(usize, &ParamStore<f32>),
) -> Result<TrainOutcome, Error> {
    let cfg = ckpt.train.clone();
    cfg.validate()?;
    let kind = cfg.resolve_action_loss(ds.action_space.kind())?;
    let t_max = ckpt.model.context_len;
    let mut rng = ckpt.rng.restore()?;
    let mut log = Vec::with_capacity(steps);
    for _ in 0..steps {
        let step = ckpt.step;
        let windows = (0..cfg.batch_size)
            .map(|_| sample_training_window(ds, t_max, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let (loss, mut grads) = batch_gradients(&ckpt.params, &ckpt.model, &windows, &ckpt.tokenizer, &cfg, kind)
            .map_err(|e| match e {
                Error::Numeric(source) => Error::TrainingFault { step, source },
                other => other,
            })?;
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip) as f64;
        if !grad_norm.is_finite() {
            return Err(Error::TrainingFault {
                step,
                source: crate::NumericError::NonFinite {
                    op: "clip_global_norm",
                    node: 0,
                },
            });
        }
        adamw_update(&mut ckpt.params, &grads, &cfg.optimizer).map_err(|source| Error::TrainingFault { step, source })?;
        ckpt.step += 1;
        log.push(MetricsRow { step, loss, grad_norm });
        if cfg.eval_every > 0 && ckpt.step % cfg.eval_every == 0 {
            on_eval(ckpt.step, &ckpt.params);
        }
    }
    ckpt.rng = RngState::capture(ckpt.rng.seed, &rng);
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

const MAGIC: &[u8; 4] = b"EDT1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: HeaderConfig,
    data_stats: DataStats,
    tokenizer: ReturnTokenizer,
    rng_state: RngState,
    step: usize,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// AdamW step count of the owning parameter.
    step: u64,
}

const MOMENT1: &str = "#adam_m";
const MOMENT2: &str = "#adam_v";

/// `EDT1`, u32 LE header length, JSON header, then raw little-endian f32
/// arrays in header order (each parameter followed by its two moments).
pub fn save_checkpoint(ckpt: &Checkpoint, mut out: impl Write) -> Result<(), Error> {
    let mut arrays = Vec::with_capacity(3 * ckpt.params.len());
    for (name, p) in ckpt.params.iter() {
        for suffix in ["", MOMENT1, MOMENT2] {
            arrays.push(ArrayEntry {
                name: format!("{name}{suffix}"),
                shape: p.value.shape().to_vec(),
                step: p.step,
            });
        }
    }
    let header = CheckpointHeader {
        config: HeaderConfig {
            model: ckpt.model.clone(),
            train: ckpt.train.clone(),
        },
        data_stats: ckpt.stats.clone(),
        tokenizer: ckpt.tokenizer,
        rng_state: ckpt.rng.clone(),
        step: ckpt.step,
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    out.write_all(MAGIC)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, p) in ckpt.params.iter() {
        for t in [&p.value, &p.m, &p.v] {
            buf.clear();
            buf.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
            out.write_all(&buf)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(mut input: impl Read) -> Result<Checkpoint, Error> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing EDT1 magic".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + len).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut offset = 8 + len;
    let mut read_array = |shape: &[usize]| -> Result<Tensor<f32>, Error> {
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint("truncated array data".into()))?;
        offset += 4 * n;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    };

    if header.arrays.len() % 3 != 0 {
        return Err(Error::Checkpoint("array table is not (value, m, v) triples".into()));
    }
    let mut params = ParamStore::new();
    for triple in header.arrays.chunks_exact(3) {
        let name = &triple[0].name;
        if triple[1].name != format!("{name}{MOMENT1}") || triple[2].name != format!("{name}{MOMENT2}") {
            return Err(Error::Checkpoint(format!("optimizer state for `{name}` out of order")));
        }
        let value = read_array(&triple[0].shape)?;
        let m = read_array(&triple[1].shape)?;
        let v = read_array(&triple[2].shape)?;
        params.insert_param(
            name.clone(),
            Param {
                value,
                m,
                v,
                step: triple[0].step,
            },
        )?;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after arrays".into()));
    }
    crate::model::check_layout(&header.config.model, &params)?;
    Ok(Checkpoint {
        model: header.config.model,
        train: header.config.train,
        stats: header.data_stats,
        tokenizer: header.tokenizer,
        rng: header.rng_state,
        step: header.step,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, make_chain_env, make_fork_env, PolicySpec};
    use crate::model::forward;
    use proptest::prelude::*;

    /// Golden-section search on the asymmetric loss, written independently of
    /// the implementation.
    fn golden_expectile(xs: &[f64], alpha: f64) -> f64 {
        let loss = |m: f64| -> f64 {
            xs.iter()
                .map(|&x| {
                    let u = x - m;
                    let w = if u < 0.0 { 1.0 - alpha } else { alpha };
                    w * u * u
                })
                .sum()
        };
        let (mut a, mut b) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let r = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-12 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if loss(c) < loss(d) {
                b = d;
            } else {
                a = c;
            }
        }
        (a + b) / 2.0
    }

    #[test]
    fn expectile_loss_examples() {
        assert_eq!(expectile_loss(&[1.0], &[1.0], 0.7), 0.0);
        assert_eq!(expectile_loss(&[0.0], &[2.0], 0.5), 2.0);
        assert!((expectile_loss(&[0.0], &[1.0], 0.99) - 0.99).abs() < 1e-15);
        assert!((expectile_loss(&[0.0], &[-1.0], 0.99) - 0.01).abs() < 1e-15);
        assert!((sample_expectile(&[0.0, 1.0], 0.99) - 0.99).abs() < 1e-12);
        assert!((sample_expectile(&[0.0, 1.0, 2.0], 0.999) - 2.0).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn half_alpha_is_half_mse(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mse = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
            prop_assert!((2.0 * expectile_loss(&p, &t, 0.5) - mse).abs() < 1e-12);
        }

        #[test]
        fn sample_expectile_matches_golden_section(xs in prop::collection::vec(-3.0f64..3.0, 1..30), alpha in 0.01f64..0.99) {
            let fast = sample_expectile(&xs, alpha);
            prop_assert!((fast - golden_expectile(&xs, alpha)).abs() < 1e-6);
        }

        #[test]
        fn expectile_monotone_in_alpha(xs in prop::collection::vec(-3.0f64..3.0, 1..30)) {
            let grid = [0.05, 0.2, 0.5, 0.7, 0.9, 0.99];
            let vals: Vec<f64> = grid.iter().map(|&a| sample_expectile(&xs, a)).collect();
            prop_assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }

        #[test]
        fn expectile_loss_is_convex(xs in prop::collection::vec(-3.0f64..3.0, 1..10), alpha in 0.01f64..0.99, a in -4.0f64..4.0, b in -4.0f64..4.0, s in 0.0f64..1.0) {
            let f = |m: f64| expectile_loss(&vec![m; xs.len()], &xs, alpha);
            let mid = s * a + (1.0 - s) * b;
            prop_assert!(f(mid) <= s * f(a) + (1.0 - s) * f(b) + 1e-9);
        }
    }

    #[test]
    fn breakdown_combination() {
        let cfg = TrainConfig::default();
        let b = LossBreakdown::combine(2.0, 1.0, 0.5, 0.8, &cfg, ActionLossKind::Mse);
        assert!((b.total - 1.902).abs() < 1e-12);
        assert!((cfg.action_weight(ActionLossKind::Ce) - 0.01).abs() < 1e-15);
    }

    fn fork_setup() -> (Dataset, ModelConfig) {
        let env = make_fork_env();
        let ds = generate_dataset(&env, &PolicySpec::fork_two_policy(), 20, 7).unwrap();
        let mut model = ModelConfig::desk(ds.obs_dim(), ds.action_space.clone(), env.horizon());
        model.embed_dim = 16;
        model.n_layers = 1;
        model.n_heads = 2;
        model.context_len = 4;
        (ds, model)
    }

    #[test]
    fn edt_loss_matches_combination_and_ignores_padding() {
        let (ds, model) = fork_setup();
        let cfg = TrainConfig::default();
        let params = init_model(&model, 3).unwrap();
        let tok = ReturnTokenizer::new(model.n_return_bins, 0.0, 1.0).unwrap();
        let w = TokenWindow::from_trajectory(&ds, 0, 0, 2, 4);
        let out = forward(&params, &model, &w, AttentionMode::ReturnMasked).unwrap();
        let b = edt_loss(&out, &w, &tok, &cfg, ds.action_space.kind()).unwrap();
        let expect = LossBreakdown::combine(b.l_return, b.l_observation, b.l_action, b.l_max, &cfg, ActionLossKind::Mse);
        assert!((b.total - expect.total).abs() < 1e-6);

        let mut narrow = model.clone();
        narrow.context_len = 2;
        let w2 = TokenWindow::from_trajectory(&ds, 0, 0, 2, 2);
        let out2 = forward(&params, &narrow, &w2, AttentionMode::ReturnMasked).unwrap();
        let b2 = edt_loss(&out2, &w2, &tok, &cfg, ds.action_space.kind()).unwrap();
        assert_eq!(b, b2);

        assert!(edt_loss(&out, &w, &tok, &cfg, ActionKind::Discrete).is_err());
    }

    #[test]
    fn perfect_predictions_leave_only_return_ce() {
        let (ds, model) = fork_setup();
        let tok = ReturnTokenizer::new(model.n_return_bins, 0.0, 1.0).unwrap();
        let w = TokenWindow::from_trajectory(&ds, 0, 0, 2, 4);
        let n = w.len();
        let mut out = ModelOutputs {
            return_logits: Tensor::zeros(&[n, model.n_return_bins]),
            rtilde: Tensor::new(vec![n], w.returns.clone()).unwrap(),
            action: Tensor::zeros(&[n, 1]),
            next_obs: Tensor::zeros(&[n, model.obs_dim]),
        };
        for i in 0..n {
            if let Action::Continuous(a) = &w.actions[i] {
                out.action.data_mut()[i] = a[0];
            }
            if i + 1 < n {
                out.next_obs.data_mut()[i * model.obs_dim..(i + 1) * model.obs_dim].copy_from_slice(&w.obs[i + 1]);
            }
            let b = tok.tokenize(w.returns[i]);
            out.return_logits.data_mut()[i * model.n_return_bins + b] = 50.0;
        }
        let b = edt_loss(&out, &w, &tok, &TrainConfig::default(), ActionKind::Continuous).unwrap();
        assert_eq!((b.l_observation, b.l_action, b.l_max), (0.0, 0.0, 0.0));
        assert!(b.l_return >= 0.0 && b.l_return < 1e-15);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (ds, model) = fork_setup();
        let cfg = TrainConfig {
            n_steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&ds, &model, &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.params, init_model(&model, cfg.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (ds, model) = fork_setup();
        let cfg = TrainConfig {
            n_steps: 6,
            batch_size: 8,
            optimizer: AdamW {
                lr: 1e-3,
                ..AdamW::default()
            },
            ..TrainConfig::default()
        };
        let a = train(&ds, &model, &cfg).unwrap();
        let b = train(&ds, &model, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint, b.checkpoint);

        let half = TrainConfig { n_steps: 3, ..cfg.clone() };
        let first = train(&ds, &model, &half).unwrap();
        let mut ck = first.checkpoint;
        ck.train = cfg.clone();
        let rest = resume(&ds, ck, 3, |_, _| {}).unwrap();
        assert_eq!(rest.checkpoint.params, a.checkpoint.params);
        assert_eq!(rest.log, a.log[3..]);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_exact() {
        let (ds, model) = fork_setup();
        let cfg = TrainConfig {
            n_steps: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let ck = train(&ds, &model, &cfg).unwrap().checkpoint;
        let mut a = Vec::new();
        save_checkpoint(&ck, &mut a).unwrap();
        let back = load_checkpoint(a.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut b = Vec::new();
        save_checkpoint(&back, &mut b).unwrap();
        assert_eq!(a, b);

        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint(&a[..a.len() - 3]).is_err());
        assert!(load_checkpoint(&a[..6]).is_err());
    }

    #[test]
    fn discrete_action_weight_enters_total() {
        let env = make_chain_env(9, 12, 0.3, 1.0).unwrap();
        let ds = generate_dataset(&env, &PolicySpec::medium_replay(), 10, 1).unwrap();
        let mut model = ModelConfig::desk(ds.obs_dim(), ds.action_space.clone(), env.horizon());
        model.embed_dim = 8;
        model.n_layers = 1;
        model.n_heads = 1;
        let params = init_model(&model, 0).unwrap();
        let tok = ReturnTokenizer::default();
        let w = TokenWindow::from_trajectory(&ds, 0, 0, ds.trajectories[0].steps().min(20), 20);
        let out = forward(&params, &model, &w, AttentionMode::ReturnMasked).unwrap();
        let cfg = TrainConfig::default();
        let b = edt_loss(&out, &w, &tok, &cfg, ActionKind::Discrete).unwrap();
        let expect = 0.001 * b.l_return + b.l_observation + 0.01 * b.l_action + 0.5 * b.l_max;
        assert!((b.total - expect).abs() < 1e-6);
        let mse = TrainConfig {
            action_loss: Some(ActionLossKind::Mse),
            ..cfg
        };
        assert!(edt_loss(&out, &w, &tok, &mse, ActionKind::Discrete).is_err());
    }
}
