//! End-to-end finite-difference verification of the full forecasting network.
//!
//! The composed forward pass (convolution branches, batch norm, channel and
//! temporal attention, the recurrent stack, self-attention, the gradient
//! reversal bridge, and both output heads) is checked against central
//! differences at `f64`. Exhaustive coordinate-by-coordinate checking is
//! infeasible at this size, so a seeded sample of coordinates from every
//! parameter array is probed instead — each probe is an independent FD
//! estimate, so sampling loses breadth, not strictness.

use adaptcast_core::model::{
    forward, forward_lstm_baseline, init_baseline, init_model, ForwardOptions, ModelConfig,
    ModelParams,
};
use adaptcast_core::rng::rng_from;
use adaptcast_core::tensor::gradcheck::rel_error;
use adaptcast_core::tensor::{ArrayD, BoundParams, Graph};
use rand::Rng;

const H: f64 = 1e-5;
/// Loss evaluation: value, parameter gradients, input gradient.
type LossEval = (f64, Vec<(String, ArrayD<f64>)>, Option<ArrayD<f64>>);
const BATCH: usize = 2;
const DOMAIN_LABELS: [usize; BATCH] = [0, 2];
/// Fixed readout weights turn the prediction matrix into a scalar with
/// non-uniform sensitivity, so sign errors cannot cancel across the batch.
const READOUT: [f64; BATCH] = [0.7, -1.3];

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::default_for(3, 4, 1, 3);
    cfg.cnn_dropout = 0.0;
    cfg.lstm_dropout = 0.0;
    cfg
}

fn random_input(cfg: &ModelConfig) -> ArrayD<f64> {
    let mut rng = rng_from(0xF00D, 7);
    let n = BATCH * cfg.window * cfg.n_features;
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ArrayD::from_vec(&[BATCH, cfg.window, cfg.n_features], data)
}

/// Scalar training loss: weighted readout of the predictions plus the
/// domain-classification cross entropy routed through gradient reversal.
/// Training mode is on (exercising the batch-norm training path) with both
/// dropout rates at zero so the function is deterministic.
///
/// Reversal strength is pinned to -1: the reversal layer's backward
/// multiplies by -lambda, so -1 makes it an exact pass-through and the
/// analytic gradient equals the true derivative of the evaluated loss.
/// Any other strength deliberately breaks that equality (that is the
/// layer's entire job), so finite differences are only meaningful here;
/// the scaling law for other strengths is proven by
/// `reversal_strength_scales_trunk_gradients_linearly` below.
fn adaptive_loss(
    model: &ModelParams<f64>,
    x: &ArrayD<f64>,
    want_grads: bool,
) -> LossEval {
    let mut graph: Graph<f64> = Graph::new();
    let bound = BoundParams::bind(&mut graph, &model.set);
    let x_leaf = graph.leaf(x, want_grads);
    let mut rng = rng_from(1, 1);
    let out = forward(
        &mut graph,
        &bound,
        model,
        &x_leaf,
        &ForwardOptions::training(true, -1.0),
        &mut rng,
    )
    .expect("forward");
    let w = graph.leaf_owned(
        ArrayD::from_vec(&[BATCH, 1], READOUT.to_vec()),
        false,
    );
    let weighted = graph.mul(&out.yhat, &w).expect("readout product");
    let fit = graph.mean_all(&weighted);
    let dhat = out.dhat.expect("domain logits requested");
    let ce = graph
        .cross_entropy_logits(&dhat, &DOMAIN_LABELS)
        .expect("domain loss");
    let total = graph.add(&fit, &ce).expect("loss sum");
    let value = graph.scalar_value(&total);
    if !want_grads {
        return (value, Vec::new(), None);
    }
    graph.backward(&total).expect("backward");
    let grads = bound.gradients(&graph);
    let x_grad = graph.grad(&x_leaf);
    (value, grads, x_grad)
}

fn baseline_loss(
    model: &ModelParams<f64>,
    x: &ArrayD<f64>,
    want_grads: bool,
) -> LossEval {
    let mut graph: Graph<f64> = Graph::new();
    let bound = BoundParams::bind(&mut graph, &model.set);
    let x_leaf = graph.leaf(x, want_grads);
    let yhat = forward_lstm_baseline(&mut graph, &bound, model, &x_leaf).expect("forward");
    let w = graph.leaf_owned(
        ArrayD::from_vec(&[BATCH, 1], READOUT.to_vec()),
        false,
    );
    let weighted = graph.mul(&yhat, &w).expect("readout product");
    let total = graph.mean_all(&weighted);
    let value = graph.scalar_value(&total);
    if !want_grads {
        return (value, Vec::new(), None);
    }
    graph.backward(&total).expect("backward");
    let grads = bound.gradients(&graph);
    let x_grad = graph.grad(&x_leaf);
    (value, grads, x_grad)
}

/// FD-check sampled coordinates of every parameter array plus the input.
/// Returns (worst relative error, per-coordinate diagnostics for every probe
/// above the stated tolerance, probes run).
fn probe_all<F>(
    model: &ModelParams<f64>,
    x: &ArrayD<f64>,
    per_array: usize,
    tolerance: f64,
    eval: F,
) -> (f64, Vec<String>, usize)
where
    F: Fn(&ModelParams<f64>, &ArrayD<f64>, bool) -> LossEval,
{
    let (_, grads, x_grad) = eval(model, x, true);
    let analytic: std::collections::BTreeMap<String, ArrayD<f64>> = grads.into_iter().collect();
    let x_grad = x_grad.expect("input gradient");

    let mut probe_rng = rng_from(0xC0FFEE, 0);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut probes = 0usize;

    let mut check = |analytic: f64, numeric: f64, at: String| {
        let err = rel_error(analytic, numeric);
        if err > worst {
            worst = err;
        }
        if err > tolerance {
            failures.push(format!(
                "{at}: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {err:.3e})"
            ));
        }
    };

    let names: Vec<String> = model.set.iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let numel = model.set.get(name).expect("param").numel();
        let g = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no gradient reached parameter '{name}'"));
        for _ in 0..per_array.min(numel) {
            let i = probe_rng.random_range(0..numel);
            let mut work = model.clone();
            let orig = work.set.get(name).expect("param").data()[i];
            work.set.get_mut(name).expect("param").data_mut()[i] = orig + H;
            let (plus, _, _) = eval(&work, x, false);
            work.set.get_mut(name).expect("param").data_mut()[i] = orig - H;
            let (minus, _, _) = eval(&work, x, false);
            let numeric = (plus - minus) / (2.0 * H);
            check(g.data()[i], numeric, format!("{name}[{i}]"));
            probes += 1;
        }
    }

    for _ in 0..2 * per_array {
        let i = probe_rng.random_range(0..x.numel());
        let mut work = x.clone();
        let orig = work.data()[i];
        work.data_mut()[i] = orig + H;
        let (plus, _, _) = eval(model, &work, false);
        work.data_mut()[i] = orig - H;
        let (minus, _, _) = eval(model, &work, false);
        let numeric = (plus - minus) / (2.0 * H);
        check(x_grad.data()[i], numeric, format!("input[{i}]"));
        probes += 1;
    }

    (worst, failures, probes)
}

#[test]
fn adaptive_network_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let model: ModelParams<f64> = init_model(&cfg, 42).expect("init");
    let x = random_input(&cfg);
    let (worst, failures, probes) = probe_all(&model, &x, 2, 1e-3, adaptive_loss);
    assert!(probes > 80, "expected broad coverage, ran {probes} probes");
    assert!(
        failures.is_empty(),
        "worst relative gradient error {worst:.3e} exceeds 1e-3 over {probes} probes:\n{}",
        failures.join("\n")
    );
}

#[test]
fn baseline_network_gradients_match_finite_differences() {
    let mut cfg = tiny_config();
    cfg.batchnorm = false;
    let model: ModelParams<f64> = init_baseline(&cfg, 43).expect("init");
    let x = random_input(&cfg);
    let (worst, failures, probes) = probe_all(&model, &x, 4, 1e-4, baseline_loss);
    assert!(probes > 15, "expected broad coverage, ran {probes} probes");
    assert!(
        failures.is_empty(),
        "worst relative gradient error {worst:.3e} exceeds 1e-4 over {probes} probes:\n{}",
        failures.join("\n")
    );
}

/// The gradient-reversal bridge must flip and scale exactly: with the fit
/// term ablated, the gradient that reaches the shared trunk from the domain
/// loss at reversal strength `λ` equals `-λ` times the gradient at `λ = -1`
/// (a plain pass-through of the same magnitude).
#[test]
fn reversal_strength_scales_trunk_gradients_linearly() {
    let cfg = tiny_config();
    let model: ModelParams<f64> = init_model(&cfg, 44).expect("init");
    let x = random_input(&cfg);

    let domain_only = |lambda: f64| -> Vec<(String, ArrayD<f64>)> {
        let mut graph: Graph<f64> = Graph::new();
        let bound = BoundParams::bind(&mut graph, &model.set);
        let x_leaf = graph.leaf(&x, false);
        let mut rng = rng_from(1, 1);
        let out = forward(
            &mut graph,
            &bound,
            &model,
            &x_leaf,
            &ForwardOptions::training(true, lambda),
            &mut rng,
        )
        .expect("forward");
        let ce = graph
            .cross_entropy_logits(&out.dhat.expect("domain logits"), &DOMAIN_LABELS)
            .expect("domain loss");
        graph.backward(&ce).expect("backward");
        bound.gradients(&graph)
    };

    let at_half = domain_only(0.5);
    let passthrough = domain_only(-1.0);
    let flipped: std::collections::BTreeMap<String, ArrayD<f64>> =
        passthrough.into_iter().collect();

    let mut checked = 0usize;
    for (name, g) in &at_half {
        // Domain-head parameters sit past the reversal point and must NOT
        // scale with lambda; everything upstream must scale by -lambda.
        let reference = &flipped[name];
        let factor = if name.starts_with("dom.") { 1.0 } else { -0.5 };
        for (a, b) in g.data().iter().zip(reference.data()) {
            assert!(
                (a - factor * b).abs() <= 1e-9 * (1.0 + b.abs()),
                "parameter {name}: grad {a} vs {factor} x {b}"
            );
            checked += 1;
        }
    }
    assert!(checked > 1000, "expected full-network coverage");
}
