//! Central-difference gradient verification.
//!
//! The numerical side only ever evaluates the loss closure (forward
//! computations); it never touches the analytic backward path, so agreement
//! between the two is meaningful evidence of correctness.

use crate::model::ModelParams;

/// Central-difference gradients of `loss` with respect to every parameter.
pub fn numerical_gradients<F>(params: &ModelParams, mut loss: F, h: f64) -> ModelParams
where
    F: FnMut(&ModelParams) -> f64,
{
    let mut probe = params.clone();
    let mut grads = ModelParams::zeros_like(&params.config);
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].1.len();
        for i in 0..len {
            let orig = probe.tensors()[ti].1[i];
            probe.tensors_mut()[ti].1[i] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[ti].1[i] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[ti].1[i] = orig;
            grads.tensors_mut()[ti].1[i] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Worst relative error between analytic and numerical gradients, together
/// with the offending tensor name. Entries where both magnitudes fall below
/// `atol` count as exact.
pub fn max_relative_error(
    analytic: &ModelParams,
    numerical: &ModelParams,
    atol: f64,
) -> (f64, String) {
    let mut worst = 0.0;
    let mut name = String::new();
    for ((tname, a), (_, n)) in analytic.tensors().iter().zip(numerical.tensors().iter()) {
        for (va, vn) in a.iter().zip(n.iter()) {
            let scale = va.abs().max(vn.abs());
            if scale < atol {
                continue;
            }
            let rel = (va - vn).abs() / scale;
            if rel > worst {
                worst = rel;
                name = tname.clone();
            }
        }
    }
    (worst, name)
}
