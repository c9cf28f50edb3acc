//! Stage-one supervised training with the optional adversarial domain term.

use super::{AdaptConfig, AdaptError, AdaptResult, EarlyStopper, MainLoss, TrainHistory};
use crate::model::{apply_bn_updates, forward, ForwardOptions, ModelParams, BN_MOMENTUM};
use crate::preprocess::window::WindowSet;
use crate::rng::rng_from;
use crate::tensor::{Adam, ArrayD, BoundParams, Element, Graph, Tensor, TensorResult};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

const SALT_SHUFFLE: u64 = 0x5348_5546;
const SALT_DROPOUT: u64 = 0x4452_4F50;

/// Number of distinct raw domain tags across a window set.
pub fn distinct_domains(windows: &WindowSet) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    for s in &windows.samples {
        seen.insert(s.domain);
    }
    seen.len()
}

/// Remap raw domain tags to dense indices `0..k` (sorted tag order).
/// Returns one label per window plus the domain count.
pub fn dense_domain_labels(windows: &WindowSet) -> (Vec<usize>, usize) {
    let tags: std::collections::BTreeSet<usize> =
        windows.samples.iter().map(|s| s.domain).collect();
    let map: BTreeMap<usize, usize> = tags.into_iter().zip(0..).collect();
    let labels = windows.samples.iter().map(|s| map[&s.domain]).collect();
    (labels, map.len())
}

/// Pack selected windows' inputs into one `[B, w, F]` array.
pub(crate) fn pack_x<E: Element>(windows: &WindowSet, idx: &[usize]) -> ArrayD<E> {
    assert!(!idx.is_empty(), "empty batch");
    let first = &windows.samples[idx[0]].x;
    let (w, f) = (first.shape()[0], first.shape()[1]);
    let mut data = Vec::with_capacity(idx.len() * w * f);
    for &i in idx {
        let x = &windows.samples[i].x;
        assert_eq!(x.shape(), [w, f], "inconsistent window geometry");
        data.extend(x.data().iter().map(|&v| E::from_f64(v)));
    }
    ArrayD::from_vec(&[idx.len(), w, f], data)
}

/// Pack selected windows' targets into one `[B, horizon]` array.
pub(crate) fn pack_y<E: Element>(windows: &WindowSet, idx: &[usize]) -> ArrayD<E> {
    assert!(!idx.is_empty(), "empty batch");
    let h = windows.samples[idx[0]].y.len();
    let mut data = Vec::with_capacity(idx.len() * h);
    for &i in idx {
        let y = &windows.samples[i].y;
        assert_eq!(y.len(), h, "inconsistent horizon");
        data.extend(y.iter().map(|&v| E::from_f64(v)));
    }
    ArrayD::from_vec(&[idx.len(), h], data)
}

/// Seeded shuffled mini-batch index partition; the tail batch may be short.
fn minibatches<R: rand::Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Build the training objective on the graph: the supervised fit term plus
/// `alpha` times the domain cross entropy when a domain output is present
/// and the weight is positive. With `alpha == 0` the domain branch
/// contributes nothing — the returned loss is exactly the fit term.
pub fn combined_loss<E: Element>(
    graph: &mut Graph<E>,
    yhat: &Tensor,
    y: &Tensor,
    dhat: Option<&Tensor>,
    labels: &[usize],
    alpha: f64,
    main: MainLoss,
) -> TensorResult<Tensor> {
    let diff = graph.sub(yhat, y)?;
    let sq = graph.mul(&diff, &diff)?;
    let mse = graph.mean_all(&sq);
    let fit = match main {
        MainLoss::Mse => mse,
        MainLoss::Rmse => graph.sqrt(&mse),
    };
    match dhat {
        Some(d) if alpha > 0.0 => {
            let ce = graph.cross_entropy_logits(d, labels)?;
            let scaled = graph.scale(&ce, alpha);
            graph.add(&fit, &scaled)
        }
        _ => Ok(fit),
    }
}

/// Validation metric on the normalized scale: the configured fit form
/// (squared error by default) over every target entry, computed in `f64`.
fn validation_loss<E: Element>(
    model: &ModelParams<E>,
    windows: &WindowSet,
    main: MainLoss,
) -> AdaptResult<f64> {
    let n = windows.len();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    // Chunked so a large validation set cannot blow up one graph.
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(256) {
        let x = pack_x::<E>(windows, chunk);
        let pred = super::predict_batch(model, &x)?;
        let y = pack_y::<E>(windows, chunk);
        for (&p, &t) in pred.data().iter().zip(y.data()) {
            let d = p.as_f64() - t.as_f64();
            sum += d * d;
            count += 1;
        }
    }
    let mse = sum / count as f64;
    Ok(match main {
        MainLoss::Mse => mse,
        MainLoss::Rmse => mse.sqrt(),
    })
}

/// A trained network plus its training record.
#[derive(Debug)]
pub struct Phase1Outcome<E: Element> {
    pub model: ModelParams<E>,
    pub history: TrainHistory,
    pub warnings: Vec<String>,
}

/// Stage-one training: seeded shuffled mini-batches, Adam, per-epoch
/// validation with exponential smoothing and patience, and restoration of
/// the best-smoothed-validation parameters.
///
/// In adversarial modes the window domain tags are remapped to dense labels
/// and must match the network's domain count; otherwise the domain branch
/// is skipped entirely, making the run bit-identical to one with the domain
/// head removed.
pub fn train_phase1<E: Element>(
    mut model: ModelParams<E>,
    train: &WindowSet,
    val: &WindowSet,
    cfg: &AdaptConfig,
) -> AdaptResult<Phase1Outcome<E>> {
    cfg.validate()?;
    let mut violations = Vec::new();
    if train.is_empty() {
        violations.push("training window set is empty".to_string());
    }
    if val.is_empty() {
        violations.push("validation window set is empty".to_string());
    }
    if !violations.is_empty() {
        return Err(AdaptError::Config(violations));
    }

    let alpha = cfg.effective_alpha();
    let (labels, n_domains) = dense_domain_labels(train);
    if alpha > 0.0 && n_domains != model.config.n_domains {
        return Err(AdaptError::Config(vec![format!(
            "training windows span {n_domains} domains but the network was \
             built for {}",
            model.config.n_domains
        )]));
    }

    let mut shuffle_rng = rng_from(cfg.seed, SALT_SHUFFLE);
    let mut dropout_rng = rng_from(cfg.seed, SALT_DROPOUT);
    let mut adam: Adam<E> = Adam::new(cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.smoothing_beta, cfg.min_delta, cfg.patience);

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_raw: Vec::new(),
        val_smoothed: Vec::new(),
        stop_epoch: 0,
        best_epoch: 0,
    };
    let mut best: Option<ModelParams<E>> = None;

    for _epoch in 0..cfg.max_epochs {
        let batches = minibatches(train.len(), cfg.batch_size, &mut shuffle_rng);
        let mut epoch_sum = 0.0f64;
        for batch in &batches {
            let x = pack_x::<E>(train, batch);
            let y = pack_y::<E>(train, batch);
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let mut graph: Graph<E> = Graph::new();
            let bound = BoundParams::bind(&mut graph, &model.set);
            let x_leaf = graph.leaf_owned(x, false);
            let y_leaf = graph.leaf_owned(y, false);
            let out = forward(
                &mut graph,
                &bound,
                &model,
                &x_leaf,
                &ForwardOptions::training(alpha > 0.0, 1.0),
                &mut dropout_rng,
            )?;
            let loss = combined_loss(
                &mut graph,
                &out.yhat,
                &y_leaf,
                out.dhat.as_ref(),
                &batch_labels,
                alpha,
                cfg.main_loss,
            )?;
            epoch_sum += graph.scalar_value(&loss).as_f64() * batch.len() as f64;
            graph.backward(&loss)?;
            let grads = bound.gradients(&graph);
            adam.step(&mut model.set, &grads)?;
            apply_bn_updates(&mut model, &out.bn_batch_stats, BN_MOMENTUM);
        }
        history.train_loss.push(epoch_sum / train.len() as f64);

        let v = validation_loss(&model, val, cfg.main_loss)?;
        let (smoothed, improved, stop) = stopper.observe(v);
        history.val_raw.push(v);
        history.val_smoothed.push(smoothed);
        if improved {
            // The first epoch always improves on the initial infinity, so a
            // snapshot is guaranteed to exist.
            history.best_epoch = stopper.best_epoch();
            best = Some(model.clone());
        }
        history.stop_epoch += 1;
        if stop {
            break;
        }
    }

    let restored = best.expect("at least one epoch ran");
    Ok(Phase1Outcome {
        model: restored,
        history,
        warnings: Vec::new(),
    })
}
