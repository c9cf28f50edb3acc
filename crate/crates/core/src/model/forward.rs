//! Graph construction for the adaptive architecture and the recurrent
//! baseline. Both build onto a caller-owned graph so training code can
//! attach losses and run backward over everything at once.

use rand_chacha::ChaCha8Rng;

use super::{ModelError, ModelKind, ModelParams, ModelResult, N_HEADS};
use crate::tensor::{BoundParams, Element, Graph, Tensor};

/// Per-call switches for [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Build the domain-classifier branch and return its logits.
    pub return_domain: bool,
    /// Training mode: dropout active, batch norm uses batch statistics.
    pub train: bool,
    /// Gradient-reversal strength ahead of the domain head.
    pub grl_lambda: f64,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            return_domain: false,
            train: false,
            grl_lambda: 1.0,
        }
    }

    pub fn training(return_domain: bool, grl_lambda: f64) -> Self {
        Self {
            return_domain,
            train: true,
            grl_lambda,
        }
    }
}

/// Handles into the built graph for the outputs and inspectable internals.
#[derive(Debug)]
pub struct ForwardOutput<E> {
    /// Forecast, shape `[B, horizon]`.
    pub yhat: Tensor,
    /// Domain logits, shape `[B, n_domains]`, when requested.
    pub dhat: Option<Tensor>,
    /// Temporal-attention weights, shape `[B, window]`.
    pub temporal_weights: Tensor,
    /// Channel-attention gate, shape `[B, fused_channels]`.
    pub channel_gate: Tensor,
    /// Per-head self-attention weights, each `[B, window, window]`.
    pub attn_weights: Vec<Tensor>,
    /// Pooled representation feeding both output heads, shape
    /// `[B, seq_width]`; useful for representation probes.
    pub features: Tensor,
    /// Batch statistics observed by each batch-norm site this pass
    /// (training mode only); fold into the model with `apply_bn_updates`.
    pub bn_batch_stats: Vec<(String, Vec<E>, Vec<E>)>,
}

fn require(bound: &BoundParams, name: &str) -> ModelResult<Tensor> {
    bound
        .try_tensor(name)
        .cloned()
        .ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

/// Linear map applied at every time step: `[B, T, In] x [In, Out] + bias`.
fn linear_seq<E: Element>(
    graph: &mut Graph<E>,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> ModelResult<Tensor> {
    let (bs, t) = (x.shape()[0], x.shape()[1]);
    let d_in = x.shape()[2];
    let d_out = w.shape()[1];
    let flat = graph.reshape(x, &[bs * t, d_in])?;
    let projected = graph.matmul(&flat, w)?;
    let with_bias = graph.add_bias(&projected, b)?;
    Ok(graph.reshape(&with_bias, &[bs, t, d_out])?)
}

fn linear<E: Element>(
    graph: &mut Graph<E>,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> ModelResult<Tensor> {
    let projected = graph.matmul(x, w)?;
    Ok(graph.add_bias(&projected, b)?)
}

/// One recurrent direction over `[B, T, D]`; returns hidden states indexed
/// by original time position. Gate layout along the 4H axis: input, forget,
/// cell, output.
fn lstm_direction<E: Element>(
    graph: &mut Graph<E>,
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
    hidden: usize,
    reverse: bool,
) -> ModelResult<Vec<Tensor>> {
    let (bs, t_len) = (x.shape()[0], x.shape()[1]);
    let zeros = crate::tensor::ArrayD::<E>::zeros(&[bs, hidden]);
    let mut h = graph.leaf_owned(zeros.clone(), false);
    let mut c = graph.leaf_owned(zeros, false);
    let mut states: Vec<Option<Tensor>> = vec![None; t_len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in order {
        let xt = graph.select_axis1(x, t)?;
        let gx = graph.matmul(&xt, wx)?;
        let gh = graph.matmul(&h, wh)?;
        let sum = graph.add(&gx, &gh)?;
        let gates = graph.add_bias(&sum, b)?;
        let i_pre = graph.slice_last(&gates, 0, hidden)?;
        let f_pre = graph.slice_last(&gates, hidden, hidden)?;
        let g_pre = graph.slice_last(&gates, 2 * hidden, hidden)?;
        let o_pre = graph.slice_last(&gates, 3 * hidden, hidden)?;
        let i = graph.sigmoid(&i_pre);
        let f = graph.sigmoid(&f_pre);
        let g = graph.tanh(&g_pre);
        let o = graph.sigmoid(&o_pre);
        let fc = graph.mul(&f, &c)?;
        let ig = graph.mul(&i, &g)?;
        c = graph.add(&fc, &ig)?;
        let tc = graph.tanh(&c);
        h = graph.mul(&o, &tc)?;
        states[t] = Some(h.clone());
    }
    Ok(states.into_iter().map(|s| s.unwrap()).collect())
}

/// Bidirectional layer: concatenated forward/backward hidden states per time.
#[allow(clippy::too_many_arguments)]
fn bilstm_layer<E: Element>(
    graph: &mut Graph<E>,
    bound: &BoundParams,
    x: &Tensor,
    layer: usize,
    hidden: usize,
) -> ModelResult<Tensor> {
    let mut outputs = Vec::new();
    for (dir, reverse) in [("f", false), ("b", true)] {
        let wx = require(bound, &format!("lstm{layer}.{dir}.wx"))?;
        let wh = require(bound, &format!("lstm{layer}.{dir}.wh"))?;
        let b = require(bound, &format!("lstm{layer}.{dir}.b"))?;
        let states = lstm_direction(graph, x, &wx, &wh, &b, hidden, reverse)?;
        let refs: Vec<&Tensor> = states.iter().collect();
        outputs.push(graph.stack_axis1(&refs)?);
    }
    Ok(graph.concat_last(&[&outputs[0], &outputs[1]])?)
}

/// Full forward pass of the adaptive architecture.
///
/// `x` must already be a leaf (or computed tensor) of shape
/// `[B, window, n_features]` in `graph`. The random stream drives dropout
/// masks and is consumed only in training mode with nonzero rates.
pub fn forward<E: Element>(
    graph: &mut Graph<E>,
    bound: &BoundParams,
    model: &ModelParams<E>,
    x: &Tensor,
    opts: &ForwardOptions,
    rng: &mut ChaCha8Rng,
) -> ModelResult<ForwardOutput<E>> {
    if model.kind != ModelKind::Adaptive {
        return Err(ModelError::MissingParam("conv.k3.w".into()));
    }
    let cfg = &model.config;
    if x.shape() != [x.shape()[0], cfg.window, cfg.n_features] {
        return Err(ModelError::Tensor(crate::tensor::TensorError::Invalid {
            op: "forward",
            msg: format!(
                "input shape {:?} does not match window {} x features {}",
                x.shape(),
                cfg.window,
                cfg.n_features
            ),
        }));
    }
    let mut bn_batch_stats = Vec::new();

    // (1) Multi-scale convolution branches over the time axis.
    let branch_tags: Vec<(String, usize)> = super::KERNEL_SIZES
        .iter()
        .map(|&k| (format!("k{k}"), 1))
        .chain(std::iter::once((
            format!("k{}d2", super::DILATED_KERNEL),
            super::DILATION,
        )))
        .collect();
    let mut branches = Vec::new();
    for (tag, dilation) in &branch_tags {
        let mut cur = x.clone();
        for stage in 0..cfg.conv_layers {
            let (conv_prefix, bn_prefix) = if stage == 0 {
                ("conv".to_string(), "bn".to_string())
            } else {
                (format!("conv{}", stage + 1), format!("bn{}", stage + 1))
            };
            let w = require(bound, &format!("{conv_prefix}.{tag}.w"))?;
            let b = require(bound, &format!("{conv_prefix}.{tag}.b"))?;
            let conv = graph.conv1d(&cur, &w, Some(&b), *dilation)?;
            let act = graph.relu(&conv);
            let normed = if cfg.batchnorm {
                let site = format!("{bn_prefix}.{tag}");
                let gamma = require(bound, &format!("{site}.gamma"))?;
                let beta = require(bound, &format!("{site}.beta"))?;
                if opts.train {
                    let (out, mean, var) = graph.batch_norm_train(&act, &gamma, &beta)?;
                    bn_batch_stats.push((site, mean, var));
                    out
                } else {
                    let stats = model
                        .bn_stats
                        .get(&site)
                        .ok_or_else(|| ModelError::MissingParam(site.clone()))?;
                    graph.batch_norm_eval(&act, &gamma, &beta, &stats.mean, &stats.var)?
                }
            } else {
                act
            };
            cur = if opts.train && cfg.cnn_dropout > 0.0 {
                graph.dropout(&normed, cfg.cnn_dropout, rng)?
            } else {
                normed
            };
        }
        branches.push(cur);
    }
    let branch_refs: Vec<&Tensor> = branches.iter().collect();
    let fused = graph.concat_last(&branch_refs)?;

    // (2) Channel attention: squeeze over time, bottleneck, sigmoid gate.
    let squeezed = graph.mean_axis1(&fused)?;
    let ca_w1 = require(bound, "chattn.w1")?;
    let ca_b1 = require(bound, "chattn.b1")?;
    let ca_w2 = require(bound, "chattn.w2")?;
    let ca_b2 = require(bound, "chattn.b2")?;
    let mid = linear(graph, &squeezed, &ca_w1, &ca_b1)?;
    let mid_act = graph.relu(&mid);
    let gate_pre = linear(graph, &mid_act, &ca_w2, &ca_b2)?;
    let channel_gate = graph.sigmoid(&gate_pre);
    let gated = graph.mul_channels(&fused, &channel_gate)?;

    // (3) Bidirectional recurrent stack with inter-layer dropout.
    let mut seq = gated.clone();
    for layer in 0..cfg.lstm_layers {
        seq = bilstm_layer(graph, bound, &seq, layer, cfg.lstm_hidden)?;
        let is_last = layer + 1 == cfg.lstm_layers;
        if !is_last && opts.train && cfg.lstm_dropout > 0.0 {
            seq = graph.dropout(&seq, cfg.lstm_dropout, rng)?;
        }
    }

    // (4) Pre-norm multi-head self-attention with a residual connection.
    let m = cfg.seq_width();
    let dh = m / N_HEADS;
    let ln_gamma = require(bound, "attn.ln.gamma")?;
    let ln_beta = require(bound, "attn.ln.beta")?;
    let normed = graph.layer_norm(&seq, &ln_gamma, &ln_beta)?;
    let wq = require(bound, "attn.wq")?;
    let bq = require(bound, "attn.bq")?;
    let wk = require(bound, "attn.wk")?;
    let bk = require(bound, "attn.bk")?;
    let wv = require(bound, "attn.wv")?;
    let bv = require(bound, "attn.bv")?;
    let q = linear_seq(graph, &normed, &wq, &bq)?;
    let k = linear_seq(graph, &normed, &wk, &bk)?;
    let v = linear_seq(graph, &normed, &wv, &bv)?;
    let mut heads = Vec::new();
    let mut attn_weights = Vec::new();
    for head in 0..N_HEADS {
        let qh = graph.slice_last(&q, head * dh, dh)?;
        let kh = graph.slice_last(&k, head * dh, dh)?;
        let vh = graph.slice_last(&v, head * dh, dh)?;
        let kt = graph.transpose_last2(&kh)?;
        let scores = graph.matmul_batch(&qh, &kt)?;
        let scaled = graph.scale(&scores, 1.0 / (dh as f64).sqrt());
        let weights = graph.softmax_last(&scaled)?;
        attn_weights.push(weights.clone());
        heads.push(graph.matmul_batch(&weights, &vh)?);
    }
    let head_refs: Vec<&Tensor> = heads.iter().collect();
    let concat = graph.concat_last(&head_refs)?;
    let wo = require(bound, "attn.wo")?;
    let bo = require(bound, "attn.bo")?;
    let projected = linear_seq(graph, &concat, &wo, &bo)?;
    let attn_out = graph.add(&seq, &projected)?;

    // (5) Temporal attention pooling over the window.
    let (bs, w_len) = (attn_out.shape()[0], attn_out.shape()[1]);
    let tattn_v = require(bound, "tattn.v")?;
    let flat = graph.reshape(&attn_out, &[bs * w_len, m])?;
    let scores_flat = graph.matmul(&flat, &tattn_v)?;
    let scores = graph.reshape(&scores_flat, &[bs, w_len])?;
    let temporal_weights = graph.softmax_last(&scores)?;
    let weighted = graph.mul_time(&attn_out, &temporal_weights)?;
    let pooled = graph.sum_axis1(&weighted)?;

    // (6) Residual from time-averaged convolution features.
    let cnn_avg = graph.mean_axis1(&gated)?;
    let rw = require(bound, "resid.w")?;
    let rb = require(bound, "resid.b")?;
    let resid = linear(graph, &cnn_avg, &rw, &rb)?;
    let z = graph.add(&pooled, &resid)?;

    // (7) Regression head, and the domain head when requested.
    let hw = require(bound, "head.w")?;
    let hb = require(bound, "head.b")?;
    let yhat = linear(graph, &z, &hw, &hb)?;

    let dhat = if opts.return_domain {
        let reversed = graph.grad_reverse(&z, opts.grl_lambda);
        let dw1 = require(bound, "dom.w1")?;
        let db1 = require(bound, "dom.b1")?;
        let dw2 = require(bound, "dom.w2")?;
        let db2 = require(bound, "dom.b2")?;
        let h1 = linear(graph, &reversed, &dw1, &db1)?;
        let h1a = graph.relu(&h1);
        Some(linear(graph, &h1a, &dw2, &db2)?)
    } else {
        None
    };

    Ok(ForwardOutput {
        yhat,
        dhat,
        temporal_weights,
        channel_gate,
        attn_weights,
        features: z,
        bn_batch_stats,
    })
}

/// Plain stacked unidirectional recurrent baseline: last hidden state into a
/// linear head. No convolution, attention, or domain branch.
pub fn forward_lstm_baseline<E: Element>(
    graph: &mut Graph<E>,
    bound: &BoundParams,
    model: &ModelParams<E>,
    x: &Tensor,
) -> ModelResult<Tensor> {
    if model.kind != ModelKind::Baseline {
        return Err(ModelError::MissingParam("base.lstm0.wx".into()));
    }
    let cfg = &model.config;
    if x.shape() != [x.shape()[0], cfg.window, cfg.n_features] {
        return Err(ModelError::Tensor(crate::tensor::TensorError::Invalid {
            op: "forward_lstm_baseline",
            msg: format!(
                "input shape {:?} does not match window {} x features {}",
                x.shape(),
                cfg.window,
                cfg.n_features
            ),
        }));
    }
    let mut seq = x.clone();
    let mut last_hidden = None;
    for layer in 0..cfg.lstm_layers {
        let wx = require(bound, &format!("base.lstm{layer}.wx"))?;
        let wh = require(bound, &format!("base.lstm{layer}.wh"))?;
        let b = require(bound, &format!("base.lstm{layer}.b"))?;
        let states = lstm_direction(graph, &seq, &wx, &wh, &b, cfg.lstm_hidden, false)?;
        last_hidden = states.last().cloned();
        let refs: Vec<&Tensor> = states.iter().collect();
        seq = graph.stack_axis1(&refs)?;
    }
    let last = last_hidden.expect("window >= 1 guarantees at least one state");
    let hw = require(bound, "base.head.w")?;
    let hb = require(bound, "base.head.b")?;
    linear(graph, &last, &hw, &hb)
}
