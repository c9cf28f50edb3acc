//! Finite-difference verification utilities for the reverse-mode engine.
//!
//! Checks run in `f64`: central differences with a small step leave truncation
//! error far below the comparison tolerance, so disagreement means a wrong
//! backward rule rather than numeric noise.

use super::array::ArrayD;
use super::graph::{Graph, Tensor};

/// Central-difference gradient of `eval` w.r.t. input `which`.
pub fn numeric_gradient<F>(
    mut eval: F,
    inputs: &[ArrayD<f64>],
    which: usize,
    h: f64,
) -> ArrayD<f64>
where
    F: FnMut(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let n = inputs[which].numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let plus = eval(&work);
        work[which].data_mut()[i] = orig - h;
        let minus = eval(&work);
        work[which].data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    ArrayD::from_vec(inputs[which].shape(), grad)
}

/// Relative error with a floored denominator so near-zero gradients compare
/// on an absolute scale: `|a - n| / max(|a|, |n|, 0.01)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Build the scalar loss from leaves bound to `inputs`, run backward, and
/// compare every analytic input gradient against central differences.
/// Returns the worst relative error over all inputs and coordinates.
pub fn max_gradient_error<F>(inputs: &[ArrayD<f64>], mut build: F, h: f64) -> f64
where
    F: FnMut(&mut Graph<f64>, &[Tensor]) -> Tensor,
{
    // Analytic pass.
    let mut graph: Graph<f64> = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| graph.leaf(a, true)).collect();
    let loss = build(&mut graph, &leaves);
    graph
        .backward(&loss)
        .expect("gradient check loss must be scalar");
    let analytic: Vec<ArrayD<f64>> = leaves
        .iter()
        .map(|t| {
            graph
                .grad(t)
                .unwrap_or_else(|| ArrayD::zeros(t.shape()))
        })
        .collect();

    // Numeric passes, one rebuild per probe.
    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        let numeric = numeric_gradient(
            |xs: &[ArrayD<f64>]| {
                let mut g: Graph<f64> = Graph::new();
                let ls: Vec<Tensor> = xs.iter().map(|a| g.leaf(a, false)).collect();
                let l = build(&mut g, &ls);
                g.scalar_value(&l)
            },
            inputs,
            which,
            h,
        );
        for (a, n) in analytic[which].data().iter().zip(numeric.data()) {
            worst = worst.max(rel_error(*a, *n));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_square_is_two_x() {
        let x = ArrayD::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let g = numeric_gradient(
            |xs: &[ArrayD<f64>]| xs[0].data().iter().map(|v| v * v).sum(),
            &[x],
            0,
            1e-5,
        );
        for (gi, xi) in g.data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn detects_correct_mul_gradient() {
        let a = ArrayD::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.7]);
        let b = ArrayD::from_vec(&[4], vec![1.5, 0.4, -0.6, 2.2]);
        let err = max_gradient_error(&[a, b], |g, ts| {
            let p = g.mul(&ts[0], &ts[1]).unwrap();
            g.mean_all(&p)
        }, 1e-5);
        assert!(err < 1e-7, "err {err}");
    }
}
