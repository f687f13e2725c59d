use std::time::{Duration, Instant};

use edt_core::data::{ReturnTokenizer, TokenWindow};
use edt_core::envs::{Action, ActionSpace};
use edt_core::model::{init_model, ModelConfig};
use edt_core::numerics::{finite_diff_check, NumericError, ParamStore};
use edt_core::training::{batch_loss_graph, ActionLossKind, TrainConfig};
use edt_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(space: ActionSpace) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        n_layers: 2,
        n_heads: 2,
        max_timestep: 12,
        obs_dim: 3,
        action_space: space,
        n_return_bins: 6,
        context_len: 5,
    }
}

fn windows(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<TokenWindow> {
    [5, 3, 1]
        .into_iter()
        .map(|n| {
            let t0 = rng.random_range(0..5);
            let actions = (0..n)
                .map(|_| match cfg.action_space {
                    ActionSpace::Continuous { dim } => Action::Continuous((0..dim).map(|_| rng.random_range(-0.9..0.9)).collect()),
                    ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..n)),
                })
                .collect();
            TokenWindow::from_valid(
                cfg.context_len,
                (0..n).map(|_| (0..cfg.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
                actions,
                (t0..t0 + n).collect(),
                &cfg.action_space,
                0,
                t0,
            )
        })
        .collect()
}

fn numeric(e: Error) -> NumericError {
    match e {
        Error::Numeric(n) => n,
        other => panic!("unexpected error: {other}"),
    }
}

/// Checks the gradient of the full combined loss in 64-bit.
fn check(space: ActionSpace, kind: ActionLossKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let model = config(space);
    let params: ParamStore<f64> = init_model(&model, 4).unwrap().cast();
    let batch = windows(&model, &mut rng);
    let tok = ReturnTokenizer::new(model.n_return_bins, 0.0, 1.0).unwrap();
    // raise the loss coefficients so every term is visible in the gradient
    let cfg = TrainConfig {
        c_r: 0.3,
        alpha: 0.9,
        ..TrainConfig::default()
    };
    let report = finite_diff_check(
        &params,
        |g, p| batch_loss_graph(g, p, &model, &batch, &tok, &cfg, kind).map_err(numeric),
        1e-6,
        1e-4,
    )
    .unwrap();
    for p in &report.params {
        assert!(p.passed, "{}: relative error {:.3e}", p.name, p.max_rel_error);
    }
    report.worst()
}

#[test]
fn full_loss_gradient_continuous_actions() {
    let t0 = Instant::now();
    let worst = check(ActionSpace::Continuous { dim: 2 }, ActionLossKind::Mse);
    assert!(worst < 1e-4);
    assert!(t0.elapsed() < Duration::from_secs(60), "{:?}", t0.elapsed());
}

#[test]
fn full_loss_gradient_discrete_actions() {
    let t0 = Instant::now();
    let worst = check(ActionSpace::Discrete { n: 3 }, ActionLossKind::Ce);
    assert!(worst < 1e-4);
    assert!(t0.elapsed() < Duration::from_secs(60), "{:?}", t0.elapsed());
}
