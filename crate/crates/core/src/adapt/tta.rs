//! Stage-two adaptation on one unseen subject's unlabeled inputs.
//!
//! All three strategies are source-free by construction: [`UnlabeledWindows`]
//! carries window inputs and positions only, so target values cannot reach
//! any adaptation objective. Batch-norm running statistics stay frozen
//! throughout (the network runs with frozen statistics while every
//! parameter, the normalization affine terms included, remains trainable).

use super::{AdaptConfig, AdaptError, AdaptResult, TtaMethod};
use crate::model::{forward, ForwardOptions, ModelParams};
use crate::preprocess::window::WindowSet;
use crate::rng::rng_from;
use crate::tensor::{Adam, ArrayD, BoundParams, Element, Graph, Tensor, TensorResult};
use rand::Rng;
use serde::{Deserialize, Serialize};

const SALT_NOISE: u64 = 0x4E4F_4953;

/// Window inputs stripped of every target value.
///
/// This is the only type the adaptation strategies accept, so label access
/// is ruled out at the interface: constructing one from a labeled window
/// set copies inputs and start positions and nothing else.
#[derive(Debug, Clone)]
pub struct UnlabeledWindows {
    xs: Vec<ArrayD<f64>>,
    t0s: Vec<usize>,
    w: usize,
    n_features: usize,
}

impl UnlabeledWindows {
    pub fn from_windows(set: &WindowSet) -> Self {
        let (w, n_features) = set
            .samples
            .first()
            .map(|s| (s.x.shape()[0], s.x.shape()[1]))
            .unwrap_or((set.w, 0));
        UnlabeledWindows {
            xs: set.samples.iter().map(|s| s.x.clone()).collect(),
            t0s: set.samples.iter().map(|s| s.t0).collect(),
            w,
            n_features,
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Window start positions, parallel to the windows.
    pub fn starts(&self) -> &[usize] {
        &self.t0s
    }

    /// Pack the selected windows into one `[B, w, F]` array.
    pub fn packed_subset<E: Element>(&self, idx: &[usize]) -> ArrayD<E> {
        assert!(!idx.is_empty(), "empty selection");
        let mut data = Vec::with_capacity(idx.len() * self.w * self.n_features);
        for &i in idx {
            data.extend(self.xs[i].data().iter().map(|&v| E::from_f64(v)));
        }
        ArrayD::from_vec(&[idx.len(), self.w, self.n_features], data)
    }

    /// Pack every window into one `[N, w, F]` array.
    pub fn packed<E: Element>(&self) -> ArrayD<E> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.packed_subset(&idx)
    }
}

/// Record of one stage-two run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TtaHistory {
    pub method: TtaMethod,
    /// Mean objective value per adaptation epoch.
    pub epoch_loss: Vec<f64>,
    /// Windows that cleared the confidence threshold (pseudo-label
    /// strategy only).
    pub n_selected: Option<usize>,
    /// Whether any parameter update ran at all.
    pub adapted: bool,
    pub warnings: Vec<String>,
}

impl TtaHistory {
    fn skipped(method: TtaMethod, warning: String, n_selected: Option<usize>) -> Self {
        TtaHistory {
            method,
            epoch_loss: Vec::new(),
            n_selected,
            adapted: false,
            warnings: vec![warning],
        }
    }
}

/// Add centered Gaussian noise of the given standard deviation (Box–Muller
/// from the supplied stream) to every element.
fn with_noise<E: Element, R: Rng + ?Sized>(x: &ArrayD<E>, sigma: f64, rng: &mut R) -> ArrayD<E> {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1], keeps ln finite
            let u2: f64 = rng.random();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            E::from_f64(v.as_f64() + sigma * z)
        })
        .collect();
    ArrayD::from_vec(x.shape(), data)
}

/// Mean squared difference between two prediction tensors.
fn mse_between<E: Element>(graph: &mut Graph<E>, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let d = graph.sub(a, b)?;
    let sq = graph.mul(&d, &d)?;
    Ok(graph.mean_all(&sq))
}

/// Agreement objective over the three prediction sets (clean and the two
/// augmentations): the mean of the three pairwise mean-squared differences.
pub fn pairwise_consistency_loss<E: Element>(
    graph: &mut Graph<E>,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
) -> TensorResult<Tensor> {
    let ab = mse_between(graph, a, b)?;
    let ac = mse_between(graph, a, c)?;
    let bc = mse_between(graph, b, c)?;
    let sum1 = graph.add(&ab, &ac)?;
    let sum = graph.add(&sum1, &bc)?;
    Ok(graph.scale(&sum, 1.0 / 3.0))
}

/// Smoothness objective over predictions of adjacent window positions.
///
/// `a` and `b` are `[P, horizon]` predictions for window starts `t` and
/// `t + 1` respectively. The positional term penalizes the full squared
/// difference between the two prediction vectors (the forecast should
/// drift slowly as the window slides); when the horizon is longer than one
/// step, an alignment term additionally compares entries that forecast the
/// same absolute day (`a[:, 1..]` against `b[:, ..h-1]`). Each term is the
/// mean over pairs of the summed squared differences.
pub fn temporal_smoothness_loss<E: Element>(
    graph: &mut Graph<E>,
    a: &Tensor,
    b: &Tensor,
) -> TensorResult<Tensor> {
    let h = *a.shape().last().expect("predictions have a horizon axis");
    let shift_mean = mse_between(graph, a, b)?;
    let shift = graph.scale(&shift_mean, h as f64);
    if h == 1 {
        return Ok(shift);
    }
    let a_tail = graph.slice_last(a, 1, h - 1)?;
    let b_head = graph.slice_last(b, 0, h - 1)?;
    let align_mean = mse_between(graph, &a_tail, &b_head)?;
    let align = graph.scale(&align_mean, (h - 1) as f64);
    graph.add(&shift, &align)
}

/// Eval-forward (frozen statistics, no dropout) returning the prediction
/// tensor; gradients still flow to every bound parameter.
fn predict_on_graph<E: Element>(
    graph: &mut Graph<E>,
    bound: &BoundParams,
    model: &ModelParams<E>,
    x: ArrayD<E>,
) -> AdaptResult<Tensor> {
    let leaf = graph.leaf_owned(x, false);
    let mut rng = rng_from(0, 0); // eval mode consumes no randomness
    let out = forward(
        graph,
        bound,
        model,
        &leaf,
        &ForwardOptions::inference(),
        &mut rng,
    )?;
    Ok(out.yhat)
}

fn require_nonempty(inputs: &UnlabeledWindows) -> AdaptResult<()> {
    if inputs.is_empty() {
        return Err(AdaptError::Config(vec![
            "test window set is empty".to_string(),
        ]));
    }
    Ok(())
}

fn batches_in_order(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Adapt by enforcing agreement between clean and noise-perturbed
/// predictions, per batch, for the configured number of epochs.
pub fn tta_consistency<E: Element>(
    mut model: ModelParams<E>,
    inputs: &UnlabeledWindows,
    cfg: &AdaptConfig,
) -> AdaptResult<(ModelParams<E>, TtaHistory)> {
    cfg.validate()?;
    require_nonempty(inputs)?;
    let mut noise_rng = rng_from(cfg.seed, SALT_NOISE);
    let mut adam: Adam<E> = Adam::new(cfg.lr_tta);
    let batches = batches_in_order(inputs.len(), cfg.batch_size);
    let mut epoch_loss = Vec::with_capacity(cfg.tta_epochs);

    for _epoch in 0..cfg.tta_epochs {
        let mut sum = 0.0f64;
        for batch in &batches {
            let x = inputs.packed_subset::<E>(batch);
            let x1 = with_noise(&x, cfg.noise_levels.0, &mut noise_rng);
            let x2 = with_noise(&x, cfg.noise_levels.1, &mut noise_rng);

            let mut graph: Graph<E> = Graph::new();
            let bound = BoundParams::bind(&mut graph, &model.set);
            let yo = predict_on_graph(&mut graph, &bound, &model, x)?;
            let y1 = predict_on_graph(&mut graph, &bound, &model, x1)?;
            let y2 = predict_on_graph(&mut graph, &bound, &model, x2)?;
            let loss = pairwise_consistency_loss(&mut graph, &yo, &y1, &y2)?;
            sum += graph.scalar_value(&loss).as_f64() * batch.len() as f64;
            graph.backward(&loss)?;
            let grads = bound.gradients(&graph);
            adam.step(&mut model.set, &grads)?;
        }
        epoch_loss.push(sum / inputs.len() as f64);
    }

    Ok((
        model,
        TtaHistory {
            method: TtaMethod::Consistency,
            epoch_loss,
            n_selected: None,
            adapted: true,
            warnings: Vec::new(),
        },
    ))
}

/// Per-window noise-stability scan with the frozen network: predictions for
/// the clean input and both augmentations, the prediction spread, and the
/// derived confidence `1 / (1 + spread)`.
pub(crate) struct StabilityScan {
    /// Clean predictions, one `horizon`-long vector per window.
    pub clean: Vec<Vec<f64>>,
    /// Mean (over horizon entries) standard deviation across the three
    /// predictions, one value per window.
    pub spread: Vec<f64>,
}

pub(crate) fn stability_scan<E: Element>(
    model: &ModelParams<E>,
    inputs: &UnlabeledWindows,
    cfg: &AdaptConfig,
) -> AdaptResult<StabilityScan> {
    let mut noise_rng = rng_from(cfg.seed, SALT_NOISE);
    let mut clean = Vec::with_capacity(inputs.len());
    let mut spread = Vec::with_capacity(inputs.len());
    for chunk in batches_in_order(inputs.len(), 256) {
        let x = inputs.packed_subset::<E>(&chunk);
        let x1 = with_noise(&x, cfg.noise_levels.0, &mut noise_rng);
        let x2 = with_noise(&x, cfg.noise_levels.1, &mut noise_rng);
        let po = super::predict_batch(model, &x)?;
        let p1 = super::predict_batch(model, &x1)?;
        let p2 = super::predict_batch(model, &x2)?;
        let h = po.shape()[1];
        for (row, _) in chunk.iter().enumerate() {
            let mut sigma_sum = 0.0f64;
            let mut clean_row = Vec::with_capacity(h);
            for j in 0..h {
                let trio = [
                    po.data()[row * h + j].as_f64(),
                    p1.data()[row * h + j].as_f64(),
                    p2.data()[row * h + j].as_f64(),
                ];
                let mean = trio.iter().sum::<f64>() / 3.0;
                let var = trio.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
                sigma_sum += var.sqrt();
                clean_row.push(trio[0]);
            }
            clean.push(clean_row);
            spread.push(sigma_sum / h as f64);
        }
    }
    Ok(StabilityScan { clean, spread })
}

/// Adapt on self-generated targets: windows whose predictions are stable
/// under input noise (confidence `1/(1+spread)` at or above the threshold)
/// become fixed pseudo-labeled examples fitted for the configured epochs.
/// If nothing clears the threshold the network is returned unchanged with a
/// warning.
pub fn tta_entropy<E: Element>(
    mut model: ModelParams<E>,
    inputs: &UnlabeledWindows,
    cfg: &AdaptConfig,
) -> AdaptResult<(ModelParams<E>, TtaHistory)> {
    cfg.validate()?;
    require_nonempty(inputs)?;
    let scan = stability_scan(&model, inputs, cfg)?;
    let selected: Vec<usize> = (0..inputs.len())
        .filter(|&i| 1.0 / (1.0 + scan.spread[i]) >= cfg.confidence_threshold)
        .collect();
    if selected.is_empty() {
        return Ok((
            model,
            TtaHistory::skipped(
                TtaMethod::Entropy,
                format!(
                    "no window reached confidence {}; adaptation skipped",
                    cfg.confidence_threshold
                ),
                Some(0),
            ),
        ));
    }

    let h = scan.clean[0].len();
    let mut adam: Adam<E> = Adam::new(cfg.lr_tta);
    let batches = batches_in_order(selected.len(), cfg.batch_size);
    let mut epoch_loss = Vec::with_capacity(cfg.tta_epochs);
    for _epoch in 0..cfg.tta_epochs {
        let mut sum = 0.0f64;
        for batch in &batches {
            let idx: Vec<usize> = batch.iter().map(|&b| selected[b]).collect();
            let x = inputs.packed_subset::<E>(&idx);
            let pseudo: Vec<E> = idx
                .iter()
                .flat_map(|&i| scan.clean[i].iter().map(|&v| E::from_f64(v)))
                .collect();
            let mut graph: Graph<E> = Graph::new();
            let bound = BoundParams::bind(&mut graph, &model.set);
            let yhat = predict_on_graph(&mut graph, &bound, &model, x)?;
            let target = graph.leaf_owned(ArrayD::from_vec(&[idx.len(), h], pseudo), false);
            let loss = mse_between(&mut graph, &yhat, &target)?;
            sum += graph.scalar_value(&loss).as_f64() * idx.len() as f64;
            graph.backward(&loss)?;
            let grads = bound.gradients(&graph);
            adam.step(&mut model.set, &grads)?;
        }
        epoch_loss.push(sum / selected.len() as f64);
    }

    Ok((
        model,
        TtaHistory {
            method: TtaMethod::Entropy,
            epoch_loss,
            n_selected: Some(selected.len()),
            adapted: true,
            warnings: Vec::new(),
        },
    ))
}

/// Index pairs `(i, j)` of windows whose start positions are consecutive.
fn adjacent_pairs(starts: &[usize]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..starts.len()).collect();
    order.sort_by_key(|&i| starts[i]);
    let mut pairs = Vec::new();
    for k in 1..order.len() {
        let (i, j) = (order[k - 1], order[k]);
        if starts[j] == starts[i] + 1 {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Adapt by penalizing jumps between predictions of adjacent window
/// positions (and misaligned overlapping-day forecasts for multi-step
/// horizons). Needs at least one pair of windows with consecutive starts;
/// otherwise the network is returned unchanged with a warning.
pub fn tta_temporal<E: Element>(
    mut model: ModelParams<E>,
    inputs: &UnlabeledWindows,
    cfg: &AdaptConfig,
) -> AdaptResult<(ModelParams<E>, TtaHistory)> {
    cfg.validate()?;
    require_nonempty(inputs)?;
    if inputs.len() < 2 {
        return Ok((
            model,
            TtaHistory::skipped(
                TtaMethod::Temporal,
                "fewer than 2 test windows; adaptation skipped".into(),
                None,
            ),
        ));
    }
    let pairs = adjacent_pairs(inputs.starts());
    if pairs.is_empty() {
        return Ok((
            model,
            TtaHistory::skipped(
                TtaMethod::Temporal,
                "no consecutive window positions; adaptation skipped".into(),
                None,
            ),
        ));
    }

    let lefts: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let rights: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let mut adam: Adam<E> = Adam::new(cfg.lr_tta);
    let mut epoch_loss = Vec::with_capacity(cfg.tta_epochs);
    for _epoch in 0..cfg.tta_epochs {
        let xa = inputs.packed_subset::<E>(&lefts);
        let xb = inputs.packed_subset::<E>(&rights);
        let mut graph: Graph<E> = Graph::new();
        let bound = BoundParams::bind(&mut graph, &model.set);
        let ya = predict_on_graph(&mut graph, &bound, &model, xa)?;
        let yb = predict_on_graph(&mut graph, &bound, &model, xb)?;
        let loss = temporal_smoothness_loss(&mut graph, &ya, &yb)?;
        epoch_loss.push(graph.scalar_value(&loss).as_f64());
        graph.backward(&loss)?;
        let grads = bound.gradients(&graph);
        adam.step(&mut model.set, &grads)?;
    }

    Ok((
        model,
        TtaHistory {
            method: TtaMethod::Temporal,
            epoch_loss,
            n_selected: None,
            adapted: true,
            warnings: Vec::new(),
        },
    ))
}
