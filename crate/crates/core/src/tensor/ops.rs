//! Primitive operations: forward builders on [`Graph`] plus the matching
//! backward rules dispatched from the reverse sweep.
//!
//! Conventions: sequence tensors are `[batch, time, channels]`; matrices are
//! row-major; reductions named `axis1` act over the time axis of a rank-3
//! tensor.

use super::array::Element;
use super::graph::{Graph, Tensor, TensorError, TensorResult};
use rand::Rng;

/// Epsilon used by both normalization layers.
pub const NORM_EPS: f64 = 1e-5;

pub(crate) enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    MatmulBatch {
        a: usize,
        b: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        dilation: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sqrt(usize),
    SoftmaxLast(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Dropout {
        x: usize,
        mask: Vec<E>,
    },
    MeanAll(usize),
    MeanAxis1(usize),
    SumAxis1(usize),
    ConcatLast(Vec<usize>),
    SliceLast {
        x: usize,
        start: usize,
    },
    SelectAxis1 {
        x: usize,
        index: usize,
    },
    StackAxis1(Vec<usize>),
    TransposeLast2(usize),
    GradReverse {
        x: usize,
        lambda: f64,
    },
    MulChannels {
        x: usize,
        gate: usize,
    },
    MulTime {
        x: usize,
        weights: usize,
    },
    CrossEntropyLogits {
        x: usize,
        labels: Vec<usize>,
        softmax: Vec<E>,
    },
    Reshape(usize),
}

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

/// `out += a @ b` for row-major `a [m,k]`, `b [k,n]`.
fn matmul_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += g @ b^T` for `g [m,n]`, `b [k,n]`, `out [m,k]`.
fn matmul_bt_acc<E: Element>(g: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = E::zero();
            for (&gv, &bv) in grow.iter().zip(brow.iter()) {
                s = s + gv * bv;
            }
            out[i * k + p] = out[i * k + p] + s;
        }
    }
}

/// `out += a^T @ g` for `a [m,k]`, `g [m,n]`, `out [k,n]`.
fn matmul_at_acc<E: Element>(a: &[E], g: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow.iter()) {
                *o = *o + av * gv;
            }
        }
    }
}

/// Left padding for a same-length convolution; the extra position of an odd
/// total pad goes on the left (earlier in time).
fn conv_left_pad(kernel: usize, dilation: usize) -> usize {
    ((kernel - 1) * dilation).div_ceil(2)
}

// ---------------------------------------------------------------------------
// Forward builders
// ---------------------------------------------------------------------------

impl<E: Element> Graph<E> {
    fn unary(&mut self, x: &Tensor, value: Vec<E>, op: Op<E>) -> Tensor {
        let rg = self.requires_grad_of(x.id);
        self.push(x.shape.clone(), value, rg, op)
    }

    fn check_same_shape(&self, op: &'static str, a: &Tensor, b: &Tensor) -> TensorResult<()> {
        if a.shape != b.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        self.check_same_shape("add", a, b)?;
        let v: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires_grad_of(a.id) || self.requires_grad_of(b.id);
        Ok(self.push(a.shape.clone(), v, rg, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        self.check_same_shape("sub", a, b)?;
        let v: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.requires_grad_of(a.id) || self.requires_grad_of(b.id);
        Ok(self.push(a.shape.clone(), v, rg, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        self.check_same_shape("mul", a, b)?;
        let v: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires_grad_of(a.id) || self.requires_grad_of(b.id);
        Ok(self.push(a.shape.clone(), v, rg, Op::Mul(a.id, b.id)))
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Tensor {
        let ce = E::from_f64(c);
        let v: Vec<E> = self.value(x).iter().map(|&e| e * ce).collect();
        self.unary(x, v, Op::Scale(x.id, c))
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Tensor {
        let ce = E::from_f64(c);
        let v: Vec<E> = self.value(x).iter().map(|&e| e + ce).collect();
        self.unary(x, v, Op::AddScalar(x.id))
    }

    /// Broadcast-add a rank-1 bias over the last axis.
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> TensorResult<Tensor> {
        let c = *x.shape.last().ok_or(TensorError::Rank {
            op: "add_bias",
            expected: 1,
            shape: x.shape.clone(),
        })?;
        if bias.shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let bv = self.value(bias).to_vec();
        let v: Vec<E> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &e)| e + bv[i % c])
            .collect();
        let rg = self.requires_grad_of(x.id) || self.requires_grad_of(bias.id);
        Ok(self.push(
            x.shape.clone(),
            v,
            rg,
            Op::AddBias {
                x: x.id,
                bias: bias.id,
            },
        ))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        if a.shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "matmul",
                expected: 2,
                shape: a.shape.clone(),
            });
        }
        if b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut v = vec![E::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), m, k, n, &mut v);
        let rg = self.requires_grad_of(a.id) || self.requires_grad_of(b.id);
        Ok(self.push(vec![m, n], v, rg, Op::Matmul { a: a.id, b: b.id }))
    }

    /// Batched matrix product over matching leading batch dims.
    pub fn matmul_batch(&mut self, a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
        if a.shape.len() != 3 || b.shape.len() != 3 {
            return Err(TensorError::Rank {
                op: "matmul_batch",
                expected: 3,
                shape: if a.shape.len() != 3 {
                    a.shape.clone()
                } else {
                    b.shape.clone()
                },
            });
        }
        if a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_batch",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (bs, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
        let mut v = vec![E::zero(); bs * m * n];
        for bi in 0..bs {
            matmul_acc(
                &self.value(a)[bi * m * k..(bi + 1) * m * k],
                &self.value(b)[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut v[bi * m * n..(bi + 1) * m * n],
            );
        }
        let rg = self.requires_grad_of(a.id) || self.requires_grad_of(b.id);
        Ok(self.push(
            vec![bs, m, n],
            v,
            rg,
            Op::MatmulBatch { a: a.id, b: b.id },
        ))
    }

    /// Same-length 1-D convolution over the time axis.
    ///
    /// `x` is `[batch, time, c_in]`, `w` is `[kernel, c_in, c_out]`; zero
    /// padding keeps the output length equal to the input length, with the
    /// extra position of an odd total pad on the left.
    pub fn conv1d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        dilation: usize,
    ) -> TensorResult<Tensor> {
        if x.shape.len() != 3 {
            return Err(TensorError::Rank {
                op: "conv1d",
                expected: 3,
                shape: x.shape.clone(),
            });
        }
        if w.shape.len() != 3 || w.shape[1] != x.shape[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: x.shape.clone(),
                rhs: w.shape.clone(),
            });
        }
        if dilation == 0 {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: "dilation must be >= 1".into(),
            });
        }
        let (bs, t, cin) = (x.shape[0], x.shape[1], x.shape[2]);
        let (ks, cout) = (w.shape[0], w.shape[2]);
        if let Some(bt) = bias {
            if bt.shape != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d",
                    lhs: w.shape.clone(),
                    rhs: bt.shape.clone(),
                });
            }
        }
        let left = conv_left_pad(ks, dilation);
        let mut v = vec![E::zero(); bs * t * cout];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for b in 0..bs {
                for to in 0..t {
                    let orow = &mut v[(b * t + to) * cout..(b * t + to + 1) * cout];
                    for k in 0..ks {
                        let ti = to as isize + (k * dilation) as isize - left as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let xrow = &xv[(b * t + ti as usize) * cin..][..cin];
                        let wmat = &wv[k * cin * cout..(k + 1) * cin * cout];
                        for (ci, &xval) in xrow.iter().enumerate() {
                            let wrow = &wmat[ci * cout..(ci + 1) * cout];
                            for (o, &wval) in orow.iter_mut().zip(wrow.iter()) {
                                *o = *o + xval * wval;
                            }
                        }
                    }
                }
            }
        }
        if let Some(bt) = bias {
            let bv = self.value(bt);
            for row in v.chunks_mut(cout) {
                for (o, &b) in row.iter_mut().zip(bv.iter()) {
                    *o = *o + b;
                }
            }
        }
        let rg = self.requires_grad_of(x.id)
            || self.requires_grad_of(w.id)
            || bias.is_some_and(|b| self.requires_grad_of(b.id));
        Ok(self.push(
            vec![bs, t, cout],
            v,
            rg,
            Op::Conv1d {
                x: x.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                dilation,
            },
        ))
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let v: Vec<E> = self
            .value(x)
            .iter()
            .map(|&e| if e > E::zero() { e } else { E::zero() })
            .collect();
        self.unary(x, v, Op::Relu(x.id))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        let one = E::one();
        let v: Vec<E> = self
            .value(x)
            .iter()
            .map(|&e| one / (one + (-e).exp()))
            .collect();
        self.unary(x, v, Op::Sigmoid(x.id))
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        let v: Vec<E> = self.value(x).iter().map(|&e| e.tanh()).collect();
        self.unary(x, v, Op::Tanh(x.id))
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Tensor {
        let v: Vec<E> = self.value(x).iter().map(|&e| e.sqrt()).collect();
        self.unary(x, v, Op::Sqrt(x.id))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: &Tensor) -> TensorResult<Tensor> {
        let c = *x.shape.last().ok_or(TensorError::Rank {
            op: "softmax_last",
            expected: 1,
            shape: x.shape.clone(),
        })?;
        let mut v = self.value(x).to_vec();
        softmax_rows(&mut v, c);
        Ok(self.unary(x, v.clone(), Op::SoftmaxLast(x.id)))
    }

    /// Per-row normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> TensorResult<Tensor> {
        let c = *x.shape.last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: x.shape.clone(),
        })?;
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let rows = x.numel() / c;
        let eps = E::from_f64(NORM_EPS);
        let mut xhat = vec![E::zero(); x.numel()];
        let mut rstd = vec![E::zero(); rows];
        let mut v = vec![E::zero(); x.numel()];
        {
            let xv = self.value(x);
            let gv = self.value(gamma).to_vec();
            let bv = self.value(beta).to_vec();
            let cn = E::from_f64(c as f64);
            for r in 0..rows {
                let row = &xv[r * c..(r + 1) * c];
                let mean = row.iter().copied().fold(E::zero(), |a, b| a + b) / cn;
                let var = row
                    .iter()
                    .map(|&e| (e - mean) * (e - mean))
                    .fold(E::zero(), |a, b| a + b)
                    / cn;
                let rs = E::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for i in 0..c {
                    let xh = (row[i] - mean) * rs;
                    xhat[r * c + i] = xh;
                    v[r * c + i] = gv[i] * xh + bv[i];
                }
            }
        }
        let rg = self.requires_grad_of(x.id)
            || self.requires_grad_of(gamma.id)
            || self.requires_grad_of(beta.id);
        Ok(self.push(
            x.shape.clone(),
            v,
            rg,
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Batch normalization over all leading axes, per channel (last axis),
    /// using batch statistics. Returns `(y, batch_mean, batch_var)` with the
    /// biased variance so the caller can fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
    ) -> TensorResult<(Tensor, Vec<E>, Vec<E>)> {
        let c = *x.shape.last().ok_or(TensorError::Rank {
            op: "batch_norm",
            expected: 1,
            shape: x.shape.clone(),
        })?;
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let rows = x.numel() / c;
        let eps = E::from_f64(NORM_EPS);
        let rn = E::from_f64(rows as f64);
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        {
            let xv = self.value(x);
            for row in xv.chunks(c) {
                for (m, &e) in mean.iter_mut().zip(row.iter()) {
                    *m = *m + e;
                }
            }
            for m in &mut mean {
                *m = *m / rn;
            }
            for row in xv.chunks(c) {
                for i in 0..c {
                    let d = row[i] - mean[i];
                    var[i] = var[i] + d * d;
                }
            }
            for vv in &mut var {
                *vv = *vv / rn;
            }
        }
        let mut xhat = vec![E::zero(); x.numel()];
        let mut v = vec![E::zero(); x.numel()];
        let mut rstd = vec![E::zero(); c];
        for i in 0..c {
            rstd[i] = E::one() / (var[i] + eps).sqrt();
        }
        {
            let xv = self.value(x);
            let gv = self.value(gamma).to_vec();
            let bv = self.value(beta).to_vec();
            for (r, row) in xv.chunks(c).enumerate() {
                for i in 0..c {
                    let xh = (row[i] - mean[i]) * rstd[i];
                    xhat[r * c + i] = xh;
                    v[r * c + i] = gv[i] * xh + bv[i];
                }
            }
        }
        let rg = self.requires_grad_of(x.id)
            || self.requires_grad_of(gamma.id)
            || self.requires_grad_of(beta.id);
        let y = self.push(
            x.shape.clone(),
            v,
            rg,
            Op::BatchNormTrain {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        );
        Ok((y, mean, var))
    }

    /// Batch normalization with frozen (running) statistics; the statistics
    /// are constants, so gradients flow only through the affine transform.
    pub fn batch_norm_eval(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[E],
        running_var: &[E],
    ) -> TensorResult<Tensor> {
        let c = *x.shape.last().ok_or(TensorError::Rank {
            op: "batch_norm",
            expected: 1,
            shape: x.shape.clone(),
        })?;
        if gamma.shape != [c] || beta.shape != [c] || running_mean.len() != c || running_var.len() != c
        {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: x.shape.clone(),
                rhs: vec![running_mean.len()],
            });
        }
        let eps = E::from_f64(NORM_EPS);
        let mut rstd = vec![E::zero(); c];
        for i in 0..c {
            rstd[i] = E::one() / (running_var[i] + eps).sqrt();
        }
        let mut xhat = vec![E::zero(); x.numel()];
        let mut v = vec![E::zero(); x.numel()];
        {
            let xv = self.value(x);
            let gv = self.value(gamma).to_vec();
            let bv = self.value(beta).to_vec();
            for (r, row) in xv.chunks(c).enumerate() {
                for i in 0..c {
                    let xh = (row[i] - running_mean[i]) * rstd[i];
                    xhat[r * c + i] = xh;
                    v[r * c + i] = gv[i] * xh + bv[i];
                }
            }
        }
        let rg = self.requires_grad_of(x.id)
            || self.requires_grad_of(gamma.id)
            || self.requires_grad_of(beta.id);
        Ok(self.push(
            x.shape.clone(),
            v,
            rg,
            Op::BatchNormEval {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and
    /// survivors are scaled by `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor,
        p: f64,
        rng: &mut R,
    ) -> TensorResult<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(x.clone());
        }
        let keep = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..x.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    E::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v: Vec<E> = self
            .value(x)
            .iter()
            .zip(mask.iter())
            .map(|(&e, &m)| e * m)
            .collect();
        Ok(self.unary(x, v, Op::Dropout { x: x.id, mask }))
    }

    /// Mean over every element, producing a scalar.
    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let n = E::from_f64(x.numel() as f64);
        let s = self.value(x).iter().copied().fold(E::zero(), |a, b| a + b);
        let rg = self.requires_grad_of(x.id);
        self.push(vec![1], vec![s / n], rg, Op::MeanAll(x.id))
    }

    fn reduce_axis1(&mut self, x: &Tensor, op: &'static str, mean: bool) -> TensorResult<Tensor> {
        if x.shape.len() != 3 {
            return Err(TensorError::Rank {
                op,
                expected: 3,
                shape: x.shape.clone(),
            });
        }
        let (bs, t, c) = (x.shape[0], x.shape[1], x.shape[2]);
        let tn = E::from_f64(t as f64);
        let mut v = vec![E::zero(); bs * c];
        {
            let xv = self.value(x);
            for b in 0..bs {
                for ti in 0..t {
                    let row = &xv[(b * t + ti) * c..][..c];
                    let out = &mut v[b * c..(b + 1) * c];
                    for (o, &e) in out.iter_mut().zip(row.iter()) {
                        *o = *o + e;
                    }
                }
            }
        }
        if mean {
            for o in &mut v {
                *o = *o / tn;
            }
        }
        let rg = self.requires_grad_of(x.id);
        let node_op = if mean {
            Op::MeanAxis1(x.id)
        } else {
            Op::SumAxis1(x.id)
        };
        Ok(self.push(vec![bs, c], v, rg, node_op))
    }

    /// Mean over the time axis: `[B, T, C] -> [B, C]`.
    pub fn mean_axis1(&mut self, x: &Tensor) -> TensorResult<Tensor> {
        self.reduce_axis1(x, "mean_axis1", true)
    }

    /// Sum over the time axis: `[B, T, C] -> [B, C]`.
    pub fn sum_axis1(&mut self, x: &Tensor) -> TensorResult<Tensor> {
        self.reduce_axis1(x, "sum_axis1", false)
    }

    /// Concatenate along the last axis; leading dims must match.
    pub fn concat_last(&mut self, xs: &[&Tensor]) -> TensorResult<Tensor> {
        let first = xs.first().ok_or(TensorError::Invalid {
            op: "concat_last",
            msg: "empty input list".into(),
        })?;
        let lead = &first.shape[..first.shape.len() - 1];
        let mut total_c = 0usize;
        for x in xs {
            if x.shape.len() != first.shape.len() || &x.shape[..x.shape.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: first.shape.clone(),
                    rhs: x.shape.clone(),
                });
            }
            total_c += *x.shape.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut v = vec![E::zero(); rows * total_c];
        let mut offset = 0usize;
        for x in xs {
            let c = *x.shape.last().unwrap();
            let xv = self.value(x);
            for r in 0..rows {
                v[r * total_c + offset..r * total_c + offset + c]
                    .copy_from_slice(&xv[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let mut shape = lead.to_vec();
        shape.push(total_c);
        let rg = xs.iter().any(|x| self.requires_grad_of(x.id));
        Ok(self.push(
            shape,
            v,
            rg,
            Op::ConcatLast(xs.iter().map(|x| x.id).collect()),
        ))
    }

    /// Contiguous slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: &Tensor, start: usize, len: usize) -> TensorResult<Tensor> {
        let c = *x.shape.last().ok_or(TensorError::Rank {
            op: "slice_last",
            expected: 1,
            shape: x.shape.clone(),
        })?;
        if start + len > c || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice_last",
                msg: format!("slice {start}..{} outside axis of length {c}", start + len),
            });
        }
        let rows = x.numel() / c;
        let mut v = vec![E::zero(); rows * len];
        {
            let xv = self.value(x);
            for r in 0..rows {
                v[r * len..(r + 1) * len]
                    .copy_from_slice(&xv[r * c + start..r * c + start + len]);
            }
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = self.requires_grad_of(x.id);
        Ok(self.push(shape, v, rg, Op::SliceLast { x: x.id, start }))
    }

    /// Pick one time step: `[B, T, C] -> [B, C]`.
    pub fn select_axis1(&mut self, x: &Tensor, index: usize) -> TensorResult<Tensor> {
        if x.shape.len() != 3 {
            return Err(TensorError::Rank {
                op: "select_axis1",
                expected: 3,
                shape: x.shape.clone(),
            });
        }
        let (bs, t, c) = (x.shape[0], x.shape[1], x.shape[2]);
        if index >= t {
            return Err(TensorError::Invalid {
                op: "select_axis1",
                msg: format!("index {index} outside time axis of length {t}"),
            });
        }
        let mut v = vec![E::zero(); bs * c];
        {
            let xv = self.value(x);
            for b in 0..bs {
                v[b * c..(b + 1) * c]
                    .copy_from_slice(&xv[(b * t + index) * c..(b * t + index + 1) * c]);
            }
        }
        let rg = self.requires_grad_of(x.id);
        Ok(self.push(vec![bs, c], v, rg, Op::SelectAxis1 { x: x.id, index }))
    }

    /// Stack rank-2 tensors `[B, C]` into `[B, T, C]` along a new time axis.
    pub fn stack_axis1(&mut self, xs: &[&Tensor]) -> TensorResult<Tensor> {
        let first = xs.first().ok_or(TensorError::Invalid {
            op: "stack_axis1",
            msg: "empty input list".into(),
        })?;
        if first.shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "stack_axis1",
                expected: 2,
                shape: first.shape.clone(),
            });
        }
        for x in xs {
            if x.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_axis1",
                    lhs: first.shape.clone(),
                    rhs: x.shape.clone(),
                });
            }
        }
        let (bs, c) = (first.shape[0], first.shape[1]);
        let t = xs.len();
        let mut v = vec![E::zero(); bs * t * c];
        for (ti, x) in xs.iter().enumerate() {
            let xv = self.value(x);
            for b in 0..bs {
                v[(b * t + ti) * c..(b * t + ti + 1) * c]
                    .copy_from_slice(&xv[b * c..(b + 1) * c]);
            }
        }
        let rg = xs.iter().any(|x| self.requires_grad_of(x.id));
        Ok(self.push(
            vec![bs, t, c],
            v,
            rg,
            Op::StackAxis1(xs.iter().map(|x| x.id).collect()),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, x: &Tensor) -> TensorResult<Tensor> {
        if x.shape.len() < 2 {
            return Err(TensorError::Rank {
                op: "transpose_last2",
                expected: 2,
                shape: x.shape.clone(),
            });
        }
        let n = x.shape.len();
        let (m, c) = (x.shape[n - 2], x.shape[n - 1]);
        let blocks = x.numel() / (m * c);
        let mut v = vec![E::zero(); x.numel()];
        {
            let xv = self.value(x);
            for blk in 0..blocks {
                let src = &xv[blk * m * c..(blk + 1) * m * c];
                let dst = &mut v[blk * m * c..(blk + 1) * m * c];
                for i in 0..m {
                    for j in 0..c {
                        dst[j * m + i] = src[i * c + j];
                    }
                }
            }
        }
        let mut shape = x.shape.clone();
        shape.swap(n - 2, n - 1);
        let rg = self.requires_grad_of(x.id);
        Ok(self.push(shape, v, rg, Op::TransposeLast2(x.id)))
    }

    /// Identity forward; multiplies the gradient by `-lambda` on the way back.
    pub fn grad_reverse(&mut self, x: &Tensor, lambda: f64) -> Tensor {
        let v = self.value(x).to_vec();
        self.unary(x, v, Op::GradReverse { x: x.id, lambda })
    }

    /// Scale each channel of `[B, T, C]` by a per-sample gate `[B, C]`.
    pub fn mul_channels(&mut self, x: &Tensor, gate: &Tensor) -> TensorResult<Tensor> {
        if x.shape.len() != 3 {
            return Err(TensorError::Rank {
                op: "mul_channels",
                expected: 3,
                shape: x.shape.clone(),
            });
        }
        let (bs, t, c) = (x.shape[0], x.shape[1], x.shape[2]);
        if gate.shape != [bs, c] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channels",
                lhs: x.shape.clone(),
                rhs: gate.shape.clone(),
            });
        }
        let mut v = vec![E::zero(); x.numel()];
        {
            let xv = self.value(x);
            let gv = self.value(gate);
            for b in 0..bs {
                let grow = &gv[b * c..(b + 1) * c];
                for ti in 0..t {
                    let base = (b * t + ti) * c;
                    for i in 0..c {
                        v[base + i] = xv[base + i] * grow[i];
                    }
                }
            }
        }
        let rg = self.requires_grad_of(x.id) || self.requires_grad_of(gate.id);
        Ok(self.push(
            x.shape.clone(),
            v,
            rg,
            Op::MulChannels {
                x: x.id,
                gate: gate.id,
            },
        ))
    }

    /// Scale each time step of `[B, T, C]` by per-step weights `[B, T]`.
    pub fn mul_time(&mut self, x: &Tensor, weights: &Tensor) -> TensorResult<Tensor> {
        if x.shape.len() != 3 {
            return Err(TensorError::Rank {
                op: "mul_time",
                expected: 3,
                shape: x.shape.clone(),
            });
        }
        let (bs, t, c) = (x.shape[0], x.shape[1], x.shape[2]);
        if weights.shape != [bs, t] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_time",
                lhs: x.shape.clone(),
                rhs: weights.shape.clone(),
            });
        }
        let mut v = vec![E::zero(); x.numel()];
        {
            let xv = self.value(x);
            let wv = self.value(weights);
            for b in 0..bs {
                for ti in 0..t {
                    let wval = wv[b * t + ti];
                    let base = (b * t + ti) * c;
                    for i in 0..c {
                        v[base + i] = xv[base + i] * wval;
                    }
                }
            }
        }
        let rg = self.requires_grad_of(x.id) || self.requires_grad_of(weights.id);
        Ok(self.push(
            x.shape.clone(),
            v,
            rg,
            Op::MulTime {
                x: x.id,
                weights: weights.id,
            },
        ))
    }

    /// Mean cross-entropy between logits `[B, C]` and integer class labels,
    /// computed via a stable log-softmax.
    pub fn cross_entropy_logits(&mut self, x: &Tensor, labels: &[usize]) -> TensorResult<Tensor> {
        if x.shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "cross_entropy_logits",
                expected: 2,
                shape: x.shape.clone(),
            });
        }
        let (bs, c) = (x.shape[0], x.shape[1]);
        if labels.len() != bs {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: x.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= c {
                return Err(TensorError::InvalidLabel { label: l, classes: c });
            }
        }
        let mut softmax = self.value(x).to_vec();
        softmax_rows(&mut softmax, c);
        let mut loss = E::zero();
        {
            let xv = self.value(x);
            for (b, &l) in labels.iter().enumerate() {
                let row = &xv[b * c..(b + 1) * c];
                let mx = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
                let lse = row
                    .iter()
                    .map(|&e| (e - mx).exp())
                    .fold(E::zero(), |a, b| a + b)
                    .ln()
                    + mx;
                loss = loss + (lse - row[l]);
            }
        }
        loss = loss / E::from_f64(bs as f64);
        let rg = self.requires_grad_of(x.id);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropyLogits {
                x: x.id,
                labels: labels.to_vec(),
                softmax,
            },
        ))
    }

    /// View with a new shape; element count must match.
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> TensorResult<Tensor> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: x.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.value(x).to_vec();
        let rg = self.requires_grad_of(x.id);
        Ok(self.push(shape.to_vec(), v, rg, Op::Reshape(x.id)))
    }
}

fn softmax_rows<E: Element>(v: &mut [E], c: usize) {
    for row in v.chunks_mut(c) {
        let mx = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
        let mut sum = E::zero();
        for e in row.iter_mut() {
            *e = (*e - mx).exp();
            sum = sum + *e;
        }
        for e in row.iter_mut() {
            *e = *e / sum;
        }
    }
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

fn add_into<E: Element>(slot: &mut [E], src: impl Iterator<Item = E>) {
    for (s, v) in slot.iter_mut().zip(src) {
        *s = *s + v;
    }
}

macro_rules! with_slot {
    ($graph:expr, $local:expr, $id:expr, |$slot:ident| $body:expr) => {
        if $graph.requires_grad_of($id) {
            let n = $graph.nodes[$id].value.len();
            let $slot = $local[$id]
                .get_or_insert_with(|| vec![E::zero(); n])
                .as_mut_slice();
            $body
        }
    };
}

pub(crate) fn backward_op<E: Element>(
    graph: &Graph<E>,
    op: &Op<E>,
    id: usize,
    gout: &[E],
    local: &mut Vec<Option<Vec<E>>>,
) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            with_slot!(graph, local, *a, |s| add_into(s, gout.iter().copied()));
            with_slot!(graph, local, *b, |s| add_into(s, gout.iter().copied()));
        }
        Op::Sub(a, b) => {
            with_slot!(graph, local, *a, |s| add_into(s, gout.iter().copied()));
            with_slot!(graph, local, *b, |s| add_into(s, gout.iter().map(|&g| -g)));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&graph.nodes[*a].value, &graph.nodes[*b].value);
            with_slot!(graph, local, *a, |s| add_into(
                s,
                gout.iter().zip(bv.iter()).map(|(&g, &v)| g * v)
            ));
            with_slot!(graph, local, *b, |s| add_into(
                s,
                gout.iter().zip(av.iter()).map(|(&g, &v)| g * v)
            ));
        }
        Op::Scale(x, c) => {
            let ce = E::from_f64(*c);
            with_slot!(graph, local, *x, |s| add_into(
                s,
                gout.iter().map(|&g| g * ce)
            ));
        }
        Op::AddScalar(x) => {
            with_slot!(graph, local, *x, |s| add_into(s, gout.iter().copied()));
        }
        Op::AddBias { x, bias } => {
            with_slot!(graph, local, *x, |s| add_into(s, gout.iter().copied()));
            let c = graph.nodes[*bias].value.len();
            with_slot!(graph, local, *bias, |s| {
                for (i, &g) in gout.iter().enumerate() {
                    s[i % c] = s[i % c] + g;
                }
            });
        }
        Op::Matmul { a, b } => {
            let (m, k) = (graph.nodes[*a].shape[0], graph.nodes[*a].shape[1]);
            let n = graph.nodes[*b].shape[1];
            let (av, bv) = (&graph.nodes[*a].value, &graph.nodes[*b].value);
            with_slot!(graph, local, *a, |s| matmul_bt_acc(gout, bv, m, k, n, s));
            with_slot!(graph, local, *b, |s| matmul_at_acc(av, gout, m, k, n, s));
        }
        Op::MatmulBatch { a, b } => {
            let (bs, m, k) = (
                graph.nodes[*a].shape[0],
                graph.nodes[*a].shape[1],
                graph.nodes[*a].shape[2],
            );
            let n = graph.nodes[*b].shape[2];
            let (av, bv) = (&graph.nodes[*a].value, &graph.nodes[*b].value);
            with_slot!(graph, local, *a, |s| {
                for bi in 0..bs {
                    matmul_bt_acc(
                        &gout[bi * m * n..(bi + 1) * m * n],
                        &bv[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut s[bi * m * k..(bi + 1) * m * k],
                    );
                }
            });
            with_slot!(graph, local, *b, |s| {
                for bi in 0..bs {
                    matmul_at_acc(
                        &av[bi * m * k..(bi + 1) * m * k],
                        &gout[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut s[bi * k * n..(bi + 1) * k * n],
                    );
                }
            });
        }
        Op::Conv1d {
            x,
            w,
            bias,
            dilation,
        } => {
            let (bs, t, cin) = (
                graph.nodes[*x].shape[0],
                graph.nodes[*x].shape[1],
                graph.nodes[*x].shape[2],
            );
            let (ks, cout) = (graph.nodes[*w].shape[0], graph.nodes[*w].shape[2]);
            let left = conv_left_pad(ks, *dilation);
            let (xv, wv) = (&graph.nodes[*x].value, &graph.nodes[*w].value);
            with_slot!(graph, local, *x, |s| {
                for b in 0..bs {
                    for to in 0..t {
                        let grow = &gout[(b * t + to) * cout..(b * t + to + 1) * cout];
                        for k in 0..ks {
                            let ti = to as isize + (k * *dilation) as isize - left as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let srow = &mut s[(b * t + ti as usize) * cin..][..cin];
                            let wmat = &wv[k * cin * cout..(k + 1) * cin * cout];
                            for (ci, sv) in srow.iter_mut().enumerate() {
                                let wrow = &wmat[ci * cout..(ci + 1) * cout];
                                let mut acc = E::zero();
                                for (&g, &wval) in grow.iter().zip(wrow.iter()) {
                                    acc = acc + g * wval;
                                }
                                *sv = *sv + acc;
                            }
                        }
                    }
                }
            });
            with_slot!(graph, local, *w, |s| {
                for b in 0..bs {
                    for to in 0..t {
                        let grow = &gout[(b * t + to) * cout..(b * t + to + 1) * cout];
                        for k in 0..ks {
                            let ti = to as isize + (k * *dilation) as isize - left as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let xrow = &xv[(b * t + ti as usize) * cin..][..cin];
                            let smat = &mut s[k * cin * cout..(k + 1) * cin * cout];
                            for (ci, &xval) in xrow.iter().enumerate() {
                                let srow = &mut smat[ci * cout..(ci + 1) * cout];
                                for (sv, &g) in srow.iter_mut().zip(grow.iter()) {
                                    *sv = *sv + xval * g;
                                }
                            }
                        }
                    }
                }
            });
            if let Some(bid) = bias {
                with_slot!(graph, local, *bid, |s| {
                    for row in gout.chunks(cout) {
                        for (sv, &g) in s.iter_mut().zip(row.iter()) {
                            *sv = *sv + g;
                        }
                    }
                });
            }
        }
        Op::Relu(x) => {
            let xv = &graph.nodes[*x].value;
            with_slot!(graph, local, *x, |s| add_into(
                s,
                gout.iter().zip(xv.iter()).map(|(&g, &v)| {
                    if v > E::zero() {
                        g
                    } else {
                        E::zero()
                    }
                })
            ));
        }
        Op::Sigmoid(x) => {
            let yv = &graph.nodes[id].value;
            with_slot!(graph, local, *x, |s| add_into(
                s,
                gout.iter()
                    .zip(yv.iter())
                    .map(|(&g, &y)| g * y * (E::one() - y))
            ));
        }
        Op::Tanh(x) => {
            let yv = &graph.nodes[id].value;
            with_slot!(graph, local, *x, |s| add_into(
                s,
                gout.iter()
                    .zip(yv.iter())
                    .map(|(&g, &y)| g * (E::one() - y * y))
            ));
        }
        Op::Sqrt(x) => {
            let yv = &graph.nodes[id].value;
            let half = E::from_f64(0.5);
            with_slot!(graph, local, *x, |s| add_into(
                s,
                gout.iter().zip(yv.iter()).map(|(&g, &y)| g * half / y)
            ));
        }
        Op::SoftmaxLast(x) => {
            let yv = &graph.nodes[id].value;
            let c = *graph.nodes[id].shape.last().unwrap();
            with_slot!(graph, local, *x, |s| {
                for r in 0..yv.len() / c {
                    let y = &yv[r * c..(r + 1) * c];
                    let g = &gout[r * c..(r + 1) * c];
                    let dot = y
                        .iter()
                        .zip(g.iter())
                        .map(|(&ye, &ge)| ye * ge)
                        .fold(E::zero(), |a, b| a + b);
                    let srow = &mut s[r * c..(r + 1) * c];
                    for i in 0..c {
                        srow[i] = srow[i] + y[i] * (g[i] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = *graph.nodes[id].shape.last().unwrap();
            let gv = &graph.nodes[*gamma].value;
            let cn = E::from_f64(c as f64);
            with_slot!(graph, local, *x, |s| {
                for r in 0..xhat.len() / c {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let g = &gout[r * c..(r + 1) * c];
                    let mut sum_dxhat = E::zero();
                    let mut sum_dxhat_xhat = E::zero();
                    for i in 0..c {
                        let dxh = g[i] * gv[i];
                        sum_dxhat = sum_dxhat + dxh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh[i];
                    }
                    let srow = &mut s[r * c..(r + 1) * c];
                    for i in 0..c {
                        let dxh = g[i] * gv[i];
                        srow[i] = srow[i]
                            + rstd[r] * (dxh - sum_dxhat / cn - xh[i] * sum_dxhat_xhat / cn);
                    }
                }
            });
            with_slot!(graph, local, *gamma, |s| {
                for (i, (&g, &xh)) in gout.iter().zip(xhat.iter()).enumerate() {
                    s[i % c] = s[i % c] + g * xh;
                }
            });
            with_slot!(graph, local, *beta, |s| {
                for (i, &g) in gout.iter().enumerate() {
                    s[i % c] = s[i % c] + g;
                }
            });
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = *graph.nodes[id].shape.last().unwrap();
            let rows = xhat.len() / c;
            let gv = &graph.nodes[*gamma].value;
            let rn = E::from_f64(rows as f64);
            with_slot!(graph, local, *x, |s| {
                // Channel-wise reductions of dxhat and dxhat*xhat.
                let mut sum_dxhat = vec![E::zero(); c];
                let mut sum_dxhat_xhat = vec![E::zero(); c];
                for r in 0..rows {
                    for i in 0..c {
                        let dxh = gout[r * c + i] * gv[i];
                        sum_dxhat[i] = sum_dxhat[i] + dxh;
                        sum_dxhat_xhat[i] = sum_dxhat_xhat[i] + dxh * xhat[r * c + i];
                    }
                }
                for r in 0..rows {
                    for i in 0..c {
                        let dxh = gout[r * c + i] * gv[i];
                        s[r * c + i] = s[r * c + i]
                            + rstd[i]
                                * (dxh
                                    - sum_dxhat[i] / rn
                                    - xhat[r * c + i] * sum_dxhat_xhat[i] / rn);
                    }
                }
            });
            with_slot!(graph, local, *gamma, |s| {
                for (i, (&g, &xh)) in gout.iter().zip(xhat.iter()).enumerate() {
                    s[i % c] = s[i % c] + g * xh;
                }
            });
            with_slot!(graph, local, *beta, |s| {
                for (i, &g) in gout.iter().enumerate() {
                    s[i % c] = s[i % c] + g;
                }
            });
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = *graph.nodes[id].shape.last().unwrap();
            let gv = &graph.nodes[*gamma].value;
            with_slot!(graph, local, *x, |s| {
                for (i, &g) in gout.iter().enumerate() {
                    let ch = i % c;
                    s[i] = s[i] + g * gv[ch] * rstd[ch];
                }
            });
            with_slot!(graph, local, *gamma, |s| {
                for (i, (&g, &xh)) in gout.iter().zip(xhat.iter()).enumerate() {
                    s[i % c] = s[i % c] + g * xh;
                }
            });
            with_slot!(graph, local, *beta, |s| {
                for (i, &g) in gout.iter().enumerate() {
                    s[i % c] = s[i % c] + g;
                }
            });
        }
        Op::Dropout { x, mask } => {
            with_slot!(graph, local, *x, |s| add_into(
                s,
                gout.iter().zip(mask.iter()).map(|(&g, &m)| g * m)
            ));
        }
        Op::MeanAll(x) => {
            let n = E::from_f64(graph.nodes[*x].value.len() as f64);
            let g = gout[0] / n;
            with_slot!(graph, local, *x, |s| add_into(
                s,
                std::iter::repeat(g).take(s.len())
            ));
        }
        Op::MeanAxis1(x) | Op::SumAxis1(x) => {
            let (bs, t, c) = (
                graph.nodes[*x].shape[0],
                graph.nodes[*x].shape[1],
                graph.nodes[*x].shape[2],
            );
            let scale = if matches!(op, Op::MeanAxis1(_)) {
                E::one() / E::from_f64(t as f64)
            } else {
                E::one()
            };
            with_slot!(graph, local, *x, |s| {
                for b in 0..bs {
                    let grow = &gout[b * c..(b + 1) * c];
                    for ti in 0..t {
                        let srow = &mut s[(b * t + ti) * c..(b * t + ti + 1) * c];
                        for (sv, &g) in srow.iter_mut().zip(grow.iter()) {
                            *sv = *sv + g * scale;
                        }
                    }
                }
            });
        }
        Op::ConcatLast(ids) => {
            let total_c = *graph.nodes[id].shape.last().unwrap();
            let rows = graph.nodes[id].value.len() / total_c;
            let mut offset = 0usize;
            for &xid in ids {
                let c = *graph.nodes[xid].shape.last().unwrap();
                with_slot!(graph, local, xid, |s| {
                    for r in 0..rows {
                        let g = &gout[r * total_c + offset..r * total_c + offset + c];
                        let srow = &mut s[r * c..(r + 1) * c];
                        for (sv, &gv2) in srow.iter_mut().zip(g.iter()) {
                            *sv = *sv + gv2;
                        }
                    }
                });
                offset += c;
            }
        }
        Op::SliceLast { x, start } => {
            let c = *graph.nodes[*x].shape.last().unwrap();
            let len = *graph.nodes[id].shape.last().unwrap();
            let rows = graph.nodes[id].value.len() / len;
            with_slot!(graph, local, *x, |s| {
                for r in 0..rows {
                    let g = &gout[r * len..(r + 1) * len];
                    let srow = &mut s[r * c + start..r * c + start + len];
                    for (sv, &gv2) in srow.iter_mut().zip(g.iter()) {
                        *sv = *sv + gv2;
                    }
                }
            });
        }
        Op::SelectAxis1 { x, index } => {
            let (bs, t, c) = (
                graph.nodes[*x].shape[0],
                graph.nodes[*x].shape[1],
                graph.nodes[*x].shape[2],
            );
            let _ = bs;
            with_slot!(graph, local, *x, |s| {
                for (b, grow) in gout.chunks(c).enumerate() {
                    let srow = &mut s[(b * t + index) * c..(b * t + index + 1) * c];
                    for (sv, &g) in srow.iter_mut().zip(grow.iter()) {
                        *sv = *sv + g;
                    }
                }
            });
        }
        Op::StackAxis1(ids) => {
            let t = ids.len();
            let c = *graph.nodes[id].shape.last().unwrap();
            let bs = graph.nodes[id].shape[0];
            for (ti, &xid) in ids.iter().enumerate() {
                with_slot!(graph, local, xid, |s| {
                    for b in 0..bs {
                        let g = &gout[(b * t + ti) * c..(b * t + ti + 1) * c];
                        let srow = &mut s[b * c..(b + 1) * c];
                        for (sv, &gv2) in srow.iter_mut().zip(g.iter()) {
                            *sv = *sv + gv2;
                        }
                    }
                });
            }
        }
        Op::TransposeLast2(x) => {
            let n = graph.nodes[id].shape.len();
            // Output is [.., N, M]; the input was [.., M, N].
            let (on, om) = (graph.nodes[id].shape[n - 2], graph.nodes[id].shape[n - 1]);
            let blocks = graph.nodes[id].value.len() / (on * om);
            with_slot!(graph, local, *x, |s| {
                for blk in 0..blocks {
                    let g = &gout[blk * on * om..(blk + 1) * on * om];
                    let srow = &mut s[blk * on * om..(blk + 1) * on * om];
                    for i in 0..on {
                        for j in 0..om {
                            // gout[i, j] contributes to input[j, i].
                            srow[j * on + i] = srow[j * on + i] + g[i * om + j];
                        }
                    }
                }
            });
        }
        Op::GradReverse { x, lambda } => {
            let le = E::from_f64(-*lambda);
            with_slot!(graph, local, *x, |s| add_into(
                s,
                gout.iter().map(|&g| g * le)
            ));
        }
        Op::MulChannels { x, gate } => {
            let (bs, t, c) = (
                graph.nodes[*x].shape[0],
                graph.nodes[*x].shape[1],
                graph.nodes[*x].shape[2],
            );
            let (xv, gatev) = (&graph.nodes[*x].value, &graph.nodes[*gate].value);
            with_slot!(graph, local, *x, |s| {
                for b in 0..bs {
                    let grow = &gatev[b * c..(b + 1) * c];
                    for ti in 0..t {
                        let base = (b * t + ti) * c;
                        for i in 0..c {
                            s[base + i] = s[base + i] + gout[base + i] * grow[i];
                        }
                    }
                }
            });
            with_slot!(graph, local, *gate, |s| {
                for b in 0..bs {
                    for ti in 0..t {
                        let base = (b * t + ti) * c;
                        for i in 0..c {
                            s[b * c + i] = s[b * c + i] + gout[base + i] * xv[base + i];
                        }
                    }
                }
            });
        }
        Op::MulTime { x, weights } => {
            let (bs, t, c) = (
                graph.nodes[*x].shape[0],
                graph.nodes[*x].shape[1],
                graph.nodes[*x].shape[2],
            );
            let (xv, wv) = (&graph.nodes[*x].value, &graph.nodes[*weights].value);
            with_slot!(graph, local, *x, |s| {
                for b in 0..bs {
                    for ti in 0..t {
                        let wval = wv[b * t + ti];
                        let base = (b * t + ti) * c;
                        for i in 0..c {
                            s[base + i] = s[base + i] + gout[base + i] * wval;
                        }
                    }
                }
            });
            with_slot!(graph, local, *weights, |s| {
                for b in 0..bs {
                    for ti in 0..t {
                        let base = (b * t + ti) * c;
                        let mut acc = E::zero();
                        for i in 0..c {
                            acc = acc + gout[base + i] * xv[base + i];
                        }
                        s[b * t + ti] = s[b * t + ti] + acc;
                    }
                }
            });
        }
        Op::CrossEntropyLogits { x, labels, softmax } => {
            let c = graph.nodes[*x].shape[1];
            let bs = labels.len();
            let inv_b = E::one() / E::from_f64(bs as f64);
            let g0 = gout[0];
            with_slot!(graph, local, *x, |s| {
                for (b, &l) in labels.iter().enumerate() {
                    for i in 0..c {
                        let onehot = if i == l { E::one() } else { E::zero() };
                        s[b * c + i] =
                            s[b * c + i] + g0 * (softmax[b * c + i] - onehot) * inv_b;
                    }
                }
            });
        }
        Op::Reshape(x) => {
            with_slot!(graph, local, *x, |s| add_into(s, gout.iter().copied()));
        }
    }
}
