//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::tensor::Tensor;

/// Worst disagreement found by [`check_param_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grads` (one tensor per parameter) against central differences
/// of `loss` at `samples_per_tensor` randomly chosen entries of every tensor.
pub fn check_param_gradients(
    params: &ParamSet,
    grads: &[Tensor],
    samples_per_tensor: usize,
    step: f64,
    seed: u64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut out = GradCheck {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
    };
    for (t, grad) in grads.iter().enumerate() {
        let n = params.tensors()[t].len();
        for i in sample(&mut rng, n, samples_per_tensor.min(n)) {
            let orig = params.tensors()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = orig + step;
            let plus = loss(&probe);
            probe.tensors_mut()[t].data_mut()[i] = orig - step;
            let minus = loss(&probe);
            probe.tensors_mut()[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grad.data()[i];
            let err = relative_error(analytic, numeric, 1e-6);
            out.checked += 1;
            if err >= out.max_relative_error {
                out.max_relative_error = err;
                out.worst = Some((params.names()[t].clone(), i, analytic, numeric));
            }
        }
    }
    out
}

/// Same check for the gradient with respect to an input tensor.
pub fn check_input_gradient(
    input: &Tensor,
    grad: &Tensor,
    samples: usize,
    step: f64,
    seed: u64,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = input.clone();
    let mut out = GradCheck {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
    };
    for i in sample(&mut rng, input.len(), samples.min(input.len())) {
        let orig = input.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = loss(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = loss(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(grad.data()[i], numeric, 1e-6);
        out.checked += 1;
        if err >= out.max_relative_error {
            out.max_relative_error = err;
            out.worst = Some(("input".into(), i, grad.data()[i], numeric));
        }
    }
    out
}
