//! Finite-difference gradient checking.
//!
//! The checker evaluates the forward pass only, so it stays independent of
//! the backward implementation it verifies. Closures passed in must be
//! deterministic: re-running them with perturbed inputs has to rebuild the
//! same computation (seed any internal randomness identically per call).

use crate::autodiff::{Graph, TensorId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar-valued graph builder, one tensor
/// per input, using step size `h`.
pub fn numeric_gradients<F>(inputs: &[Tensor], build: &F, h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut out = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut grad = Tensor::zeros(input.shape().to_vec());
        for elem in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[elem] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[elem] -= h;
            grad.data_mut()[elem] = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Analytic gradients via the tape's backward pass, aligned with `inputs`.
pub fn analytic_gradients<F>(inputs: &[Tensor], build: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    Ok(ids.iter().map(|&id| grads.of(id).clone()).collect())
}

/// Largest per-element relative error between analytic and finite-difference
/// gradients. Relative to `max(|analytic|, |numeric|, 1e-4)` so near-zero
/// gradients are compared absolutely.
pub fn max_rel_error<F>(inputs: &[Tensor], build: &F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    let analytic = analytic_gradients(inputs, build)?;
    let numeric = numeric_gradients(inputs, build, h)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let scale = av.abs().max(nv.abs()).max(1e-4);
            worst = worst.max((av - nv).abs() / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let inputs = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let build = |g: &mut Graph, ids: &[TensorId]| {
            let sq = g.mul(ids[0], ids[0])?;
            Ok(g.sum_all(sq))
        };
        let err = max_rel_error(&inputs, &build, 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn catches_wrong_gradient() {
        // relu's kink at 0 breaks finite differences when probed across it;
        // use that to confirm the checker actually discriminates.
        let inputs = vec![Tensor::vector(vec![1e-9])];
        let build = |g: &mut Graph, ids: &[TensorId]| {
            let r = g.relu(ids[0]);
            Ok(g.sum_all(r))
        };
        let err = max_rel_error(&inputs, &build, 1e-5).unwrap();
        assert!(err > 1e-2, "kink should disagree, err = {err}");
    }
}
