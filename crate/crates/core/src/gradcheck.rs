//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitude below which errors are measured in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradient of `f` at `params` against central differences with
/// step `eps` over every coordinate. Returns the worst relative error.
///
/// `f` must build the same pure scalar function on every call.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    check_impl(f, params, &[eps], None)
}

/// Like [`finite_diff_check`] but probes at most `per_tensor` randomly chosen
/// coordinates of each parameter tensor.
pub fn finite_diff_check_sampled<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    check_impl(f, params, &[eps], Some((per_tensor, seed)))
}

/// Sampled check over several step sizes. Each probed coordinate scores the
/// smallest error any step achieves, so a coordinate only fails when every
/// step disagrees with the analytic gradient.
pub fn finite_diff_check_steps<F>(
    f: F,
    params: &[Tensor],
    steps: &[f64],
    per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    check_impl(f, params, steps, Some((per_tensor, seed)))
}

fn check_impl<F>(f: F, params: &[Tensor], steps: &[f64], sampling: Option<(usize, u64)>) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if steps.is_empty() || steps.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::Argument(format!(
            "finite-difference steps must be positive, got {steps:?}"
        )));
    }
    let analytic = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = params.iter().map(|t| g.param(t)).collect();
        let loss = f(&g, &vars)?;
        g.backward(loss)?.collect(&vars)?
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = ps
            .iter()
            .map(|t| g.constant(Tensor::new(t.shape(), t.data().to_vec()).expect("valid")))
            .collect();
        let out = f(&g, &vars)?;
        if out.len() != 1 {
            return Err(Error::contract("finite_diff_check: function must be scalar"));
        }
        Ok(out.item())
    };

    let mut rng = sampling.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, grad) in analytic.iter().enumerate() {
        let n = work[ti].len();
        let coords: Vec<usize> = match (&mut rng, sampling) {
            (Some(rng), Some((k, _))) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for ci in coords {
            let orig = work[ti].data()[ci];
            let mut best = f64::INFINITY;
            for &eps in steps {
                work[ti].data_mut()[ci] = orig + eps;
                let plus = eval(&work)?;
                work[ti].data_mut()[ci] = orig - eps;
                let minus = eval(&work)?;
                let numeric = (plus - minus) / (2.0 * eps);
                best = best.min(relative_error(grad[ci], numeric));
            }
            work[ti].data_mut()[ci] = orig;
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let p = Tensor::new(&[3], vec![0.3, -1.2, 2.5]).unwrap();
        let a = Tensor::new(&[3], vec![1.0, 2.0, 0.5]).unwrap();
        let err = finite_diff_check(
            |g, v| {
                let a = g.leaf(&a);
                Ok(v[0].square().mul(a)?.sum().add_scalar(1.0))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn zero_step_is_argument_error() {
        let p = Tensor::zeros(&[1]);
        let r = finite_diff_check(|_, v| Ok(v[0].sum()), &[p], 0.0);
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn linear_function_has_no_error() {
        let p = Tensor::new(&[2], vec![0.5, 0.7]).unwrap();
        let err = finite_diff_check(|_, v| Ok(v[0].sum()), &[p], 1e-5).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn sampled_check_probes_subset() {
        let p = Tensor::new(&[50], (0..50).map(|i| i as f64 * 0.01).collect()).unwrap();
        let err = finite_diff_check_sampled(|_, v| Ok(v[0].square().sum()), &[p], 1e-5, 5, 3)
            .unwrap();
        assert!(err < 1e-7);
    }

    #[test]
    fn multi_step_takes_best_step_per_coordinate() {
        let p = Tensor::new(&[2], vec![1e-6, -0.4]).unwrap();
        fn f<'g>(_: &'g Graph, v: &[Var<'g>]) -> Result<Var<'g>> {
            Ok(v[0].relu().sum())
        }
        let coarse = finite_diff_check(f, &[p.clone()], 1e-4).unwrap();
        let both = finite_diff_check_steps(f, &[p], &[1e-4, 1e-8], 2, 0).unwrap();
        assert!(coarse > 0.1);
        assert!(both < 1e-6, "{both}");
    }
}
