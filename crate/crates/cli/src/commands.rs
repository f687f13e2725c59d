use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use anyhow::{Context, Result};
use edt_core::data::{read_jsonl, write_jsonl, Dataset};
use edt_core::envs::{episode_rng, generate_dataset, optimal_return_oracle, run_episode, Env, PolicySpec};
use edt_core::inference::{rollout, Agent, InferenceConfig, RolloutReport};
use edt_core::training::{
    initial_checkpoint, load_checkpoint, resume, save_checkpoint, write_metrics_csv, Checkpoint, LossBreakdown,
    TrainConfig,
};
use edt_core::ConfigError;
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SweepParam, SweepValue};

/// Episodes behind the uniform-random reference score.
pub const RANDOM_BASELINE_EPISODES: usize = 1000;
const RANDOM_BASELINE_SEED: u64 = 0;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataSummary {
    pub path: PathBuf,
    pub episodes: usize,
    pub transitions: usize,
    pub return_min: f32,
    pub return_max: f32,
    pub return_mean: f32,
}

impl DataSummary {
    fn of(path: PathBuf, ds: &Dataset) -> Self {
        let returns: Vec<f32> = ds.trajectories.iter().map(|t| t.episode_return()).collect();
        Self {
            path,
            episodes: returns.len(),
            transitions: ds.n_transitions(),
            return_min: returns.iter().copied().fold(f32::INFINITY, f32::min),
            return_max: returns.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            return_mean: returns.iter().sum::<f32>() / returns.len() as f32,
        }
    }
}

fn generate(cfg: &RunConfig, env: &Env) -> Result<Dataset> {
    Ok(generate_dataset(env, &cfg.policy(), cfg.n_episodes, cfg.seeds.data)?)
}

pub fn gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    cfg.validate()?;
    let env = cfg.build_env()?;
    let ds = generate(cfg, &env)?;
    let path = cfg.dataset_path();
    create_parent(&path)?;
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_jsonl(&ds, BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))?;
    Ok(DataSummary::of(path, &ds))
}

fn read_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset_path();
    let file = File::open(&path).with_context(|| format!("opening dataset {}", path.display()))?;
    let ds = read_jsonl(BufReader::new(file)).with_context(|| format!("reading dataset {}", path.display()))?;
    if ds.meta.env != cfg.env {
        return Err(ConfigError::invalid("dataset", "was generated for a different env").into());
    }
    Ok(cfg.data.prepare(ds)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    Ok(load_checkpoint(BufReader::new(file)).with_context(|| format!("loading checkpoint {}", path.display()))?)
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    save_checkpoint(ckpt, &mut buf).expect("writing to memory");
    buf
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub step: usize,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: usize,
    pub final_loss: Option<LossBreakdown>,
    pub evals: Vec<EvalRow>,
}

fn train_run(ds: &Dataset, ckpt: Checkpoint, steps: usize, cfg: &RunConfig, env: &Env) -> Result<(Checkpoint, Vec<u8>, Vec<EvalRow>)> {
    let start = cfg.start_state(env)?;
    let (model, stats, tokenizer) = (ckpt.model.clone(), ckpt.stats.clone(), ckpt.tokenizer);
    let mut evals = Vec::new();
    let mut eval_err = None;
    let outcome = resume(ds, ckpt, steps, |step, params| {
        if eval_err.is_some() {
            return;
        }
        let agent = Agent {
            params,
            model: &model,
            stats: &stats,
            tokenizer: &tokenizer,
        };
        match rollout(env, &agent, &cfg.inference, cfg.eval.n_episodes, cfg.seeds.eval, start) {
            Ok(r) => evals.push(EvalRow {
                step,
                mean_return: r.mean_return(),
                std_return: r.std_return(),
            }),
            Err(e) => eval_err = Some(e),
        }
    })?;
    if let Some(e) = eval_err {
        return Err(e.into());
    }
    let metrics = csv_bytes(|b| write_metrics_csv(&outcome.log, b));
    Ok((outcome.checkpoint, metrics, evals))
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let env = cfg.build_env()?;
    let ds = read_dataset(cfg)?;
    let ckpt = match &cfg.resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            if ckpt.model.obs_dim != ds.obs_dim() || ckpt.model.action_space != ds.action_space {
                return Err(ConfigError::invalid("resume", "checkpoint does not match the dataset").into());
            }
            ckpt
        }
        None => initial_checkpoint(&ds, &cfg.model_config(&env), &cfg.train_config()?)?,
    };
    let steps = cfg.train.n_steps;
    let (ckpt, metrics, evals) = train_run(&ds, ckpt, steps, cfg, &env)?;

    let checkpoint = cfg.out_dir.join("checkpoint.edt");
    write_file(&checkpoint, &checkpoint_bytes(&ckpt))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    write_file(&metrics_path, &metrics)?;
    if !evals.is_empty() {
        let mut buf = b"step,mean_return,std_return\n".to_vec();
        for e in &evals {
            writeln!(buf, "{},{},{}", e.step, e.mean_return, e.std_return)?;
        }
        write_file(&cfg.out_dir.join("eval.csv"), &buf)?;
    }
    let final_loss = last_loss(&metrics);
    Ok(TrainSummary {
        checkpoint,
        metrics: metrics_path,
        steps,
        final_loss,
        evals,
    })
}

fn last_loss(metrics_csv: &[u8]) -> Option<LossBreakdown> {
    let text = std::str::from_utf8(metrics_csv).ok()?;
    let line = text.lines().skip(1).last()?;
    let v: Vec<f64> = line.split(',').skip(1).take(5).map(|x| x.parse().ok()).collect::<Option<_>>()?;
    Some(LossBreakdown {
        total: v[0],
        l_return: v[1],
        l_observation: v[2],
        l_action: v[3],
        l_max: v[4],
    })
}

/// Mean return of the uniform-random policy over 1000 seeded episodes,
/// memoized per (env, start).
pub fn random_baseline(env: &Env, start: Option<usize>) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    let key = format!("{}|{start:?}", serde_json::to_string(env.spec()).expect("env spec serializes"));
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&v) = cache.lock().unwrap().get(&key) {
        return v;
    }
    let total: f64 = (0..RANDOM_BASELINE_EPISODES)
        .map(|i| {
            let mut rng = episode_rng(RANDOM_BASELINE_SEED, i as u64);
            let s = start.unwrap_or_else(|| env.initial_states()[rng.random_range(0..env.initial_states().len())]);
            run_episode(env, &PolicySpec::Random, s, &mut rng).episode_return() as f64
        })
        .sum();
    let v = total / RANDOM_BASELINE_EPISODES as f64;
    cache.lock().unwrap().insert(key, v);
    v
}

/// Best achievable return from `start`, or its mean over the initial states.
pub fn oracle_return(env: &Env, start: Option<usize>) -> f64 {
    match start {
        Some(s) => optimal_return_oracle(env, s),
        None => {
            let init = env.initial_states();
            init.iter().map(|&s| optimal_return_oracle(env, s)).sum::<f64>() / init.len() as f64
        }
    }
}

/// `(mean - random) / (oracle - random)`; undefined when the two references
/// coincide.
pub fn normalized_score(mean: f64, random: f64, oracle: f64) -> Option<f64> {
    let span = oracle - random;
    (span.abs() > 1e-12).then(|| (mean - random) / span)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResults {
    /// `elastic` or `fixed`.
    pub mode: String,
    /// History length in fixed mode.
    pub w: Option<usize>,
    pub n_episodes: usize,
    pub seed: u64,
    pub start: Option<String>,
    pub context_len: usize,
    pub delta: usize,
    pub kappa: f64,
    pub heuristic: bool,
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
    pub oracle_return: f64,
    pub random_baseline: f64,
    pub normalized_score: Option<f64>,
    pub mean_forward_passes: f64,
}

fn mode_of(inf: &InferenceConfig) -> (String, Option<usize>) {
    match inf.fixed_w {
        Some(w) => ("fixed".into(), Some(w)),
        None => ("elastic".into(), None),
    }
}

pub fn evaluate(ckpt: &Checkpoint, env: &Env, cfg: &RunConfig, inf: &InferenceConfig, seed: u64) -> Result<(EvalResults, RolloutReport)> {
    let start = cfg.start_state(env)?;
    let report = rollout(env, &Agent::from_checkpoint(ckpt), inf, cfg.eval.n_episodes, seed, start)?;
    let random = random_baseline(env, start);
    let oracle = oracle_return(env, start);
    let (mode, w) = mode_of(inf);
    let passes = report.decisions.iter().map(|d| d.forward_passes).sum::<usize>() as f64 / report.decisions.len().max(1) as f64;
    let results = EvalResults {
        mode,
        w,
        n_episodes: cfg.eval.n_episodes,
        seed,
        start: cfg.eval.start.clone(),
        context_len: inf.context_len,
        delta: inf.delta,
        kappa: inf.kappa,
        heuristic: inf.heuristic,
        mean: report.mean_return(),
        std: report.std_return(),
        returns: report.returns.clone(),
        oracle_return: oracle,
        random_baseline: random,
        normalized_score: normalized_score(report.mean_return(), random, oracle),
        mean_forward_passes: passes,
    };
    Ok((results, report))
}

pub fn histogram_csv(report: &RolloutReport, t_max: usize) -> Vec<u8> {
    let mut buf = b"w,count\n".to_vec();
    for (i, c) in report.length_histogram(t_max).iter().enumerate() {
        writeln!(buf, "{},{c}", i + 1).expect("writing to memory");
    }
    buf
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub results: EvalResults,
    pub report: RolloutReport,
    pub results_path: PathBuf,
    pub lengths_path: PathBuf,
    pub histogram_path: PathBuf,
}

pub fn eval(cfg: &RunConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    let env = cfg.build_env()?;
    let ckpt = read_checkpoint(&cfg.checkpoint_path())?;
    if env.obs_dim() != ckpt.model.obs_dim || env.action_space() != &ckpt.model.action_space {
        return Err(ConfigError::invalid("env", "does not match the checkpoint's observation or action space").into());
    }
    cfg.inference.validate(&ckpt.model)?;
    let (results, report) = evaluate(&ckpt, &env, cfg, &cfg.inference, cfg.seeds.eval)?;

    let results_path = cfg.out_dir.join("results.json");
    write_file(&results_path, &serde_json::to_vec_pretty(&results)?)?;
    let lengths_path = cfg.out_dir.join("chosen_lengths.csv");
    write_file(&lengths_path, &csv_bytes(|b| report.write_length_log(b)))?;
    let histogram_path = cfg.out_dir.join("length_histogram.csv");
    write_file(&histogram_path, &histogram_csv(&report, cfg.inference.context_len))?;
    Ok(EvalOutput {
        results,
        report,
        results_path,
        lengths_path,
        histogram_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub mode: String,
    pub w: Option<usize>,
    pub mean_return: f64,
    pub std_return: f64,
    /// SHA-256 of the evaluated checkpoint.
    pub train_hash: String,
}

pub const ABLATION_HEADER: &str = "param,value,seed,mode,w,mean_return,std_return,train_hash";

pub fn write_ablation_csv(rows: &[AblationRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{ABLATION_HEADER}")?;
    for r in rows {
        let w = r.w.map(|w| w.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{w},{},{},{}",
            r.param, r.value, r.seed, r.mode, r.mean_return, r.std_return, r.train_hash
        )?;
    }
    Ok(())
}

fn inference_for(base: &InferenceConfig, v: SweepValue) -> InferenceConfig {
    let mut inf = base.clone();
    match v {
        SweepValue::Alpha(_) => {}
        SweepValue::Delta(d) => {
            inf.delta = d;
            inf.fixed_w = None;
        }
        SweepValue::FixedW(w) => inf.fixed_w = Some(w),
        SweepValue::Elastic(true) => inf.fixed_w = None,
        SweepValue::Elastic(false) => inf.fixed_w = Some(inf.context_len),
    }
    inf
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutput {
    pub rows: Vec<AblationRow>,
    pub table: PathBuf,
}

/// Trains and evaluates every (value, seed) pair. Inference-only sweeps
/// share one checkpoint per seed. Rows are ordered by value, then seed.
pub fn ablate(cfg: &RunConfig) -> Result<AblationOutput> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ConfigError::invalid("sweep", "ablate needs a sweep (config `sweep` or --sweep NAME=V1,V2)"))?;
    let (param, values) = sweep.parse()?;
    if cfg.seeds.sweep.is_empty() {
        return Err(ConfigError::invalid("seeds.sweep", "no seeds").into());
    }
    let env = cfg.build_env()?;
    let ds = match &cfg.dataset {
        Some(_) => read_dataset(cfg)?,
        None => cfg.data.prepare(generate(cfg, &env)?)?,
    };
    let model = cfg.model_config(&env);
    let base_train = cfg.train_config()?;
    let mut inferences = Vec::with_capacity(values.len());
    for &v in &values {
        let inf = inference_for(&cfg.inference, v);
        inf.validate(&model)?;
        inferences.push(inf);
    }
    let dir = cfg.out_dir.join("ablate");

    let mut grid: Vec<Vec<Option<AblationRow>>> = vec![vec![None; cfg.seeds.sweep.len()]; values.len()];
    for (si, &seed) in cfg.seeds.sweep.iter().enumerate() {
        let train_one = |alpha: Option<f64>, name: String| -> Result<(Checkpoint, String)> {
            let tc = TrainConfig {
                seed,
                alpha: alpha.unwrap_or(base_train.alpha),
                ..base_train.clone()
            };
            let init = initial_checkpoint(&ds, &model, &tc)?;
            let (ckpt, _, _) = train_run(&ds, init, tc.n_steps, cfg, &env)?;
            let bytes = checkpoint_bytes(&ckpt);
            write_file(&dir.join(name), &bytes)?;
            Ok((ckpt, sha256_hex(&bytes)))
        };
        let shared = match param {
            SweepParam::Alpha => None,
            _ => Some(train_one(None, format!("seed{seed}.edt"))?),
        };
        for (vi, &v) in values.iter().enumerate() {
            let owned;
            let (ckpt, hash) = match (&shared, v) {
                (Some((c, h)), _) => (c, h),
                (None, SweepValue::Alpha(a)) => {
                    owned = train_one(Some(a), format!("alpha{a}_seed{seed}.edt"))?;
                    (&owned.0, &owned.1)
                }
                (None, _) => unreachable!("only alpha sweeps retrain"),
            };
            let (res, _) = evaluate(ckpt, &env, cfg, &inferences[vi], seed)?;
            eprintln!("{}={} seed {seed}: mean {:.4} std {:.4}", param.name(), v.label(), res.mean, res.std);
            grid[vi][si] = Some(AblationRow {
                param: param.name().to_string(),
                value: v.label(),
                seed,
                mode: res.mode,
                w: res.w,
                mean_return: res.mean,
                std_return: res.std,
                train_hash: hash.clone(),
            });
        }
    }
    let rows: Vec<AblationRow> = grid.into_iter().flatten().map(|r| r.expect("every cell filled")).collect();
    let table = cfg.out_dir.join("ablation.csv");
    write_file(&table, &csv_bytes(|b| write_ablation_csv(&rows, b)))?;
    Ok(AblationOutput { rows, table })
}
