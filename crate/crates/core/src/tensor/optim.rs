//! Named parameter storage and the Adam update rule.

use super::array::{ArrayD, Element};
use super::graph::{Graph, Tensor, TensorError, TensorResult};
use std::collections::BTreeMap;

/// One named parameter. Non-trainable entries (e.g. running statistics) ride
/// along in checkpoints but are never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub value: ArrayD<E>,
    pub trainable: bool,
}

/// Ordered, name-indexed parameter collection. Iteration order is insertion
/// order, which fixes the layout of checkpoints and gradient lists.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<E> {
    params: Vec<Param<E>>,
    index: BTreeMap<String, usize>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Insert a new parameter; panics on duplicate names (a wiring bug).
    pub fn insert(&mut self, name: &str, value: ArrayD<E>, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<E>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<E>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .map(|&i| self.params[i].trainable)
            .unwrap_or(false)
    }

    /// Mark a parameter (non-)trainable, e.g. to freeze a subnetwork.
    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(&i) = self.index.get(name) {
            self.params[i].trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Parameters bound onto a graph as leaves for one forward/backward pass.
pub struct BoundParams {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl BoundParams {
    /// Bind every parameter as a leaf; trainable entries require gradients.
    pub fn bind<E: Element>(graph: &mut Graph<E>, params: &ParamSet<E>) -> Self {
        let mut entries = Vec::with_capacity(params.len());
        let mut index = BTreeMap::new();
        for p in params.iter() {
            let t = graph.leaf(&p.value, p.trainable);
            index.insert(p.name.clone(), entries.len());
            entries.push((p.name.clone(), t));
        }
        BoundParams { entries, index }
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn try_tensor(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Collect gradients accumulated on the graph, in binding order.
    /// Parameters that did not participate in the loss are omitted.
    pub fn gradients<E: Element>(&self, graph: &Graph<E>) -> Vec<(String, ArrayD<E>)> {
        self.entries
            .iter()
            .filter_map(|(name, t)| graph.grad(t).map(|g| (name.clone(), g)))
            .collect()
    }
}

struct AdamSlot<E> {
    t: u64,
    m: Vec<E>,
    v: Vec<E>,
}

/// Adam with bias correction; first/second-moment state is kept per
/// parameter name, so parameters that skip a step keep consistent counters.
pub struct Adam<E> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, AdamSlot<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    /// Apply one update. Gradients must be finite; a non-finite entry aborts
    /// with the offending parameter's name. Non-trainable parameters are
    /// rejected as a wiring bug.
    pub fn step(
        &mut self,
        params: &mut ParamSet<E>,
        grads: &[(String, ArrayD<E>)],
    ) -> TensorResult<()> {
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(TensorError::Invalid {
                    op: "adam",
                    msg: format!("non-finite gradient for parameter '{name}'"),
                });
            }
            if !params.is_trainable(name) {
                return Err(TensorError::Invalid {
                    op: "adam",
                    msg: format!("gradient supplied for non-trainable parameter '{name}'"),
                });
            }
            let value = params.get_mut(name).ok_or_else(|| TensorError::Invalid {
                op: "adam",
                msg: format!("unknown parameter '{name}'"),
            })?;
            if value.shape() != grad.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = value.numel();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                t: 0,
                m: vec![E::zero(); n],
                v: vec![E::zero(); n],
            });
            slot.t += 1;
            let b1 = E::from_f64(self.beta1);
            let b2 = E::from_f64(self.beta2);
            let one = E::one();
            let bc1 = E::from_f64(1.0 - self.beta1.powi(slot.t as i32));
            let bc2 = E::from_f64(1.0 - self.beta2.powi(slot.t as i32));
            let lr = E::from_f64(self.lr);
            let eps = E::from_f64(self.eps);
            let data = value.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Drop all moment state (fresh optimizer semantics).
    pub fn reset(&mut self) {
        self.slots.clear();
    }
}
