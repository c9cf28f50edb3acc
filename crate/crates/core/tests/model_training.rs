//! Capacity sanity: a short optimization run must drive training error on a
//! tiny memorization task to near zero, proving that gradients, the
//! optimizer, and the batch-norm running-statistics fold-in cooperate.

use adaptcast_core::model::{
    apply_bn_updates, forward, forward_lstm_baseline, init_baseline, init_model, ForwardOptions,
    ModelConfig, ModelKind, ModelParams, BN_MOMENTUM,
};
use adaptcast_core::rng::rng_from;
use adaptcast_core::tensor::{Adam, ArrayD, BoundParams, Graph, Real};
use rand::Rng;

const SAMPLES: usize = 8;
const STEPS: usize = 200;
const LR: f64 = 1e-2;

fn make_task(cfg: &ModelConfig) -> (ArrayD<Real>, ArrayD<Real>) {
    let mut rng = rng_from(0xBEEF, 0);
    let nx = SAMPLES * cfg.window * cfg.n_features;
    let x: Vec<Real> = (0..nx).map(|_| rng.random_range(-1.0..1.0) as Real).collect();
    let y: Vec<Real> = (0..SAMPLES * cfg.horizon)
        .map(|_| rng.random_range(0.0..1.0) as Real)
        .collect();
    (
        ArrayD::from_vec(&[SAMPLES, cfg.window, cfg.n_features], x),
        ArrayD::from_vec(&[SAMPLES, cfg.horizon], y),
    )
}

fn mse_of(pred: &[Real], target: &[Real]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p - t) as f64;
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64
}

/// One optimization step on the full batch; returns the training MSE at the
/// parameters *before* the update.
fn train_step(model: &mut ModelParams<Real>, x: &ArrayD<Real>, y: &ArrayD<Real>, adam: &mut Adam<Real>) -> f64 {
    let mut graph: Graph<Real> = Graph::new();
    let bound = BoundParams::bind(&mut graph, &model.set);
    let x_leaf = graph.leaf(x, false);
    let mut rng = rng_from(7, 7);
    let (yhat, bn_stats) = match model.kind {
        ModelKind::Adaptive => {
            let out = forward(
                &mut graph,
                &bound,
                model,
                &x_leaf,
                &ForwardOptions::training(false, 0.0),
                &mut rng,
            )
            .expect("forward");
            (out.yhat, out.bn_batch_stats)
        }
        ModelKind::Baseline => {
            let yhat =
                forward_lstm_baseline(&mut graph, &bound, model, &x_leaf).expect("forward");
            (yhat, Vec::new())
        }
    };
    let y_leaf = graph.leaf(y, false);
    let diff = graph.sub(&yhat, &y_leaf).expect("diff");
    let sq = graph.mul(&diff, &diff).expect("square");
    let loss = graph.mean_all(&sq);
    let value = graph.scalar_value(&loss) as f64;
    graph.backward(&loss).expect("backward");
    let grads = bound.gradients(&graph);
    adam.step(&mut model.set, &grads).expect("adam step");
    apply_bn_updates(model, &bn_stats, BN_MOMENTUM);
    value
}

#[test]
fn short_run_memorizes_a_small_batch() {
    let mut cfg = ModelConfig::default_for(4, 3, 1, 2);
    cfg.cnn_dropout = 0.0;
    cfg.lstm_dropout = 0.0;
    let mut model: ModelParams<Real> = init_model(&cfg, 5).expect("init");
    let (x, y) = make_task(&cfg);
    let mut adam: Adam<Real> = Adam::new(LR);

    let first = train_step(&mut model, &x, &y, &mut adam);
    let mut last = first;
    for _ in 1..STEPS {
        last = train_step(&mut model, &x, &y, &mut adam);
    }
    assert!(
        last < 1e-3,
        "training MSE after {STEPS} steps is {last:.3e} (started at {first:.3e})"
    );
    assert!(last < first / 100.0, "optimization barely moved: {first:.3e} -> {last:.3e}");

    // The running statistics accumulated during training must support
    // inference: frozen-statistics predictions fit the batch nearly as well
    // as the batch-statistics ones did.
    let mut graph: Graph<Real> = Graph::new();
    let bound = BoundParams::bind(&mut graph, &model.set);
    let x_leaf = graph.leaf(&x, false);
    let mut rng = rng_from(7, 7);
    let out = forward(
        &mut graph,
        &bound,
        &model,
        &x_leaf,
        &ForwardOptions::inference(),
        &mut rng,
    )
    .expect("forward");
    let eval_mse = mse_of(graph.value(&out.yhat), y.data());
    assert!(
        eval_mse < 5e-3,
        "frozen-statistics MSE {eval_mse:.3e} should track the training fit"
    );
}

#[test]
fn short_run_memorizes_with_the_recurrent_baseline() {
    let mut cfg = ModelConfig::default_for(4, 3, 1, 2);
    cfg.cnn_dropout = 0.0;
    cfg.lstm_dropout = 0.0;
    let mut model: ModelParams<Real> = init_baseline(&cfg, 6).expect("init");
    let (x, y) = make_task(&cfg);
    let mut adam: Adam<Real> = Adam::new(LR);

    let first = train_step(&mut model, &x, &y, &mut adam);
    let mut last = first;
    for _ in 1..STEPS {
        last = train_step(&mut model, &x, &y, &mut adam);
    }
    assert!(
        last < 1e-3,
        "training MSE after {STEPS} steps is {last:.3e} (started at {first:.3e})"
    );
}
