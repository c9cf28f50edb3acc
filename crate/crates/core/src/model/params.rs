//! Parameter construction: shapes derive from the configuration alone, and
//! initialization draws every array from one seeded stream in a fixed order,
//! with uniform bounds of 1/sqrt(fan_in).

use std::collections::BTreeMap;

use rand::Rng;

use super::{ModelConfig, ModelResult, DILATED_KERNEL, DOMAIN_HIDDEN, KERNEL_SIZES};
use crate::rng::rng_from;
use crate::tensor::{ArrayD, Element, ParamSet};

const SALT_INIT: u64 = 0x1217;

/// Which forward pass a parameter set supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Adaptive,
    Baseline,
}

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Element> BnStats<E> {
    fn fresh(c: usize) -> Self {
        Self {
            mean: vec![E::zero(); c],
            var: vec![E::one(); c],
        }
    }
}

/// Complete model state: trainable arrays plus batch-norm running stats.
#[derive(Debug, Clone)]
pub struct ModelParams<E: Element> {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub seed: u64,
    pub set: ParamSet<E>,
    pub bn_stats: BTreeMap<String, BnStats<E>>,
}

/// How one array is initialized.
enum Init {
    /// Uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn(usize),
    Zeros,
    Ones,
}

/// Declarative list of (name, shape, init) for the adaptive architecture.
fn adaptive_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let f = cfg.n_features;
    let c = cfg.cnn_hidden;
    let fused = cfg.fused_channels();
    let m = cfg.seq_width();
    let h = cfg.lstm_hidden;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();

    let branch_tags: Vec<(String, usize)> = KERNEL_SIZES
        .iter()
        .map(|&k| (format!("k{k}"), k))
        .chain(std::iter::once((format!("k{DILATED_KERNEL}d2"), DILATED_KERNEL)))
        .collect();
    for stage in 0..cfg.conv_layers {
        let (conv_prefix, bn_prefix, cin) = if stage == 0 {
            ("conv".to_string(), "bn".to_string(), f)
        } else {
            (format!("conv{}", stage + 1), format!("bn{}", stage + 1), c)
        };
        for (tag, k) in &branch_tags {
            let fan = k * cin;
            out.push((
                format!("{conv_prefix}.{tag}.w"),
                vec![*k, cin, c],
                Init::FanIn(fan),
            ));
            out.push((format!("{conv_prefix}.{tag}.b"), vec![c], Init::FanIn(fan)));
            if cfg.batchnorm {
                out.push((format!("{bn_prefix}.{tag}.gamma"), vec![c], Init::Ones));
                out.push((format!("{bn_prefix}.{tag}.beta"), vec![c], Init::Zeros));
            }
        }
    }

    // Channel attention bottleneck: fused -> fused/4 -> fused.
    let mid = fused / super::CHANNEL_REDUCTION;
    out.push(("chattn.w1".into(), vec![fused, mid], Init::FanIn(fused)));
    out.push(("chattn.b1".into(), vec![mid], Init::FanIn(fused)));
    out.push(("chattn.w2".into(), vec![mid, fused], Init::FanIn(mid)));
    out.push(("chattn.b2".into(), vec![fused], Init::FanIn(mid)));

    // Bidirectional recurrent stack.
    for layer in 0..cfg.lstm_layers {
        let din = if layer == 0 { fused } else { m };
        for dir in ["f", "b"] {
            out.push((format!("lstm{layer}.{dir}.wx"), vec![din, 4 * h], Init::FanIn(din)));
            out.push((format!("lstm{layer}.{dir}.wh"), vec![h, 4 * h], Init::FanIn(h)));
            out.push((format!("lstm{layer}.{dir}.b"), vec![4 * h], Init::FanIn(h)));
        }
    }

    // Pre-norm multi-head self-attention with output projection.
    out.push(("attn.ln.gamma".into(), vec![m], Init::Ones));
    out.push(("attn.ln.beta".into(), vec![m], Init::Zeros));
    for tag in ["q", "k", "v", "o"] {
        out.push((format!("attn.w{tag}"), vec![m, m], Init::FanIn(m)));
        out.push((format!("attn.b{tag}"), vec![m], Init::FanIn(m)));
    }

    // Temporal attention scoring vector.
    out.push(("tattn.v".into(), vec![m, 1], Init::FanIn(m)));

    // Residual projection from time-averaged convolution features.
    out.push(("resid.w".into(), vec![fused, m], Init::FanIn(fused)));
    out.push(("resid.b".into(), vec![m], Init::FanIn(fused)));

    // Regression head.
    out.push(("head.w".into(), vec![m, cfg.horizon], Init::FanIn(m)));
    out.push(("head.b".into(), vec![cfg.horizon], Init::FanIn(m)));

    // Domain classifier behind the gradient-reversal point.
    out.push(("dom.w1".into(), vec![m, DOMAIN_HIDDEN], Init::FanIn(m)));
    out.push(("dom.b1".into(), vec![DOMAIN_HIDDEN], Init::FanIn(m)));
    out.push((
        "dom.w2".into(),
        vec![DOMAIN_HIDDEN, cfg.n_domains],
        Init::FanIn(DOMAIN_HIDDEN),
    ));
    out.push((
        "dom.b2".into(),
        vec![cfg.n_domains],
        Init::FanIn(DOMAIN_HIDDEN),
    ));

    out
}

/// Declarative layout of the unidirectional recurrent baseline.
fn baseline_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.lstm_hidden;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    for layer in 0..cfg.lstm_layers {
        let din = if layer == 0 { cfg.n_features } else { h };
        out.push((format!("base.lstm{layer}.wx"), vec![din, 4 * h], Init::FanIn(din)));
        out.push((format!("base.lstm{layer}.wh"), vec![h, 4 * h], Init::FanIn(h)));
        out.push((format!("base.lstm{layer}.b"), vec![4 * h], Init::FanIn(h)));
    }
    out.push(("base.head.w".into(), vec![h, cfg.horizon], Init::FanIn(h)));
    out.push(("base.head.b".into(), vec![cfg.horizon], Init::FanIn(h)));
    out
}

fn materialize<E: Element>(
    kind: ModelKind,
    config: &ModelConfig,
    seed: u64,
    layout: Vec<(String, Vec<usize>, Init)>,
) -> ModelParams<E> {
    let mut rng = rng_from(seed, SALT_INIT);
    let mut set = ParamSet::new();
    let mut bn_stats = BTreeMap::new();
    for (name, shape, init) in layout {
        let numel: usize = shape.iter().product();
        let data: Vec<E> = match init {
            Init::FanIn(fan) => {
                let bound = 1.0 / (fan as f64).sqrt();
                (0..numel)
                    .map(|_| E::from_f64(rng.random_range(-bound..bound)))
                    .collect()
            }
            Init::Zeros => vec![E::zero(); numel],
            Init::Ones => vec![E::one(); numel],
        };
        if name.starts_with("bn") {
            if let Some(site) = name.strip_suffix(".gamma") {
                bn_stats.insert(site.to_string(), BnStats::fresh(numel));
            }
        }
        set.insert(&name, ArrayD::from_vec(&shape, data), true);
    }
    ModelParams {
        kind,
        config: config.clone(),
        seed,
        set,
        bn_stats,
    }
}

/// Initialize the full adaptive architecture.
pub fn init_model<E: Element>(config: &ModelConfig, seed: u64) -> ModelResult<ModelParams<E>> {
    config.validate()?;
    Ok(materialize(
        ModelKind::Adaptive,
        config,
        seed,
        adaptive_layout(config),
    ))
}

/// Initialize the plain recurrent baseline.
pub fn init_baseline<E: Element>(config: &ModelConfig, seed: u64) -> ModelResult<ModelParams<E>> {
    config.validate()?;
    Ok(materialize(
        ModelKind::Baseline,
        config,
        seed,
        baseline_layout(config),
    ))
}

/// Fold freshly observed batch statistics into the running estimates:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates<E: Element>(
    model: &mut ModelParams<E>,
    batch_stats: &[(String, Vec<E>, Vec<E>)],
    momentum: f64,
) {
    let m = E::from_f64(momentum);
    let keep = E::from_f64(1.0 - momentum);
    for (site, mean, var) in batch_stats {
        let entry = model
            .bn_stats
            .get_mut(site)
            .unwrap_or_else(|| panic!("unknown batch-norm site '{site}'"));
        for (r, &b) in entry.mean.iter_mut().zip(mean.iter()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in entry.var.iter_mut().zip(var.iter()) {
            *r = keep * *r + m * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Real;

    fn tiny() -> ModelConfig {
        ModelConfig::default_for(3, 4, 1, 3)
    }

    #[test]
    fn same_seed_bitwise_equal_params() {
        let a: ModelParams<Real> = init_model(&tiny(), 5).unwrap();
        let b: ModelParams<Real> = init_model(&tiny(), 5).unwrap();
        assert_eq!(a.set.len(), b.set.len());
        for (pa, pb) in a.set.iter().zip(b.set.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.shape(), pb.value.shape());
            for (x, y) in pa.value.data().iter().zip(pb.value.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a: ModelParams<Real> = init_model(&tiny(), 5).unwrap();
        let b: ModelParams<Real> = init_model(&tiny(), 6).unwrap();
        let differs = a
            .set
            .iter()
            .zip(b.set.iter())
            .any(|(pa, pb)| pa.value.data() != pb.value.data());
        assert!(differs);
    }

    #[test]
    fn scalar_count_is_a_pure_function_of_config() {
        let a: ModelParams<Real> = init_model(&tiny(), 1).unwrap();
        let b: ModelParams<Real> = init_model(&tiny(), 999).unwrap();
        assert_eq!(a.set.num_scalars(), b.set.num_scalars());

        let mut wider = tiny();
        wider.cnn_hidden = 32;
        let c: ModelParams<Real> = init_model(&wider, 1).unwrap();
        assert!(c.set.num_scalars() > a.set.num_scalars());
    }

    #[test]
    fn invalid_config_rejected_at_init() {
        let mut cfg = tiny();
        cfg.lstm_hidden = 100;
        assert!(init_model::<Real>(&cfg, 0).is_err());
    }

    #[test]
    fn bn_sites_exist_only_with_batchnorm() {
        let with: ModelParams<Real> = init_model(&tiny(), 2).unwrap();
        assert_eq!(with.bn_stats.len(), 4); // one per branch
        let mut cfg = tiny();
        cfg.batchnorm = false;
        let without: ModelParams<Real> = init_model(&cfg, 2).unwrap();
        assert!(without.bn_stats.is_empty());
    }

    #[test]
    fn init_bounds_respect_fan_in() {
        let model: ModelParams<Real> = init_model(&tiny(), 3).unwrap();
        // head.w has fan_in = seq width (128) -> bound ~0.0884.
        let head = model.set.get("head.w").unwrap();
        let bound = 1.0 / (tiny().seq_width() as f64).sqrt();
        for &v in head.data() {
            assert!((v as f64).abs() < bound);
        }
    }

    #[test]
    fn bn_update_moves_running_stats_toward_batch() {
        let mut model: ModelParams<Real> = init_model(&tiny(), 4).unwrap();
        let site = model.bn_stats.keys().next().unwrap().clone();
        let c = model.bn_stats[&site].mean.len();
        let batch = vec![(site.clone(), vec![1.0 as Real; c], vec![2.0 as Real; c])];
        apply_bn_updates(&mut model, &batch, 0.1);
        let stats = &model.bn_stats[&site];
        for &m in &stats.mean {
            assert!((m - 0.1).abs() < 1e-6);
        }
        for &v in &stats.var {
            assert!((v - (0.9 + 0.2)).abs() < 1e-6);
        }
    }

    #[test]
    fn baseline_has_only_recurrent_and_head_params() {
        let model: ModelParams<Real> = init_baseline(&tiny(), 1).unwrap();
        assert_eq!(model.kind, ModelKind::Baseline);
        for p in model.set.iter() {
            assert!(p.name.starts_with("base."), "unexpected param {}", p.name);
        }
        assert!(model.bn_stats.is_empty());
    }
}
