//! Multi-kernel maximum mean discrepancy, the marginal alignment loss.
//!
//! `mmd2` is the biased V-statistic
//! `mean K(X,X) + mean K(Y,Y) - 2 mean K(X,Y)` with a mixture of RBF kernels
//! `k(x, y) = Σ_j w_j exp(-|x - y|² / (2 σ_j²))`. It is differentiable in both
//! arguments and never negative.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
    weights: Vec<f64>,
}

impl KernelSpec {
    /// Weights are normalized to sum to one.
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::config("kernel spec needs at least one bandwidth"));
        }
        if bandwidths.len() != weights.len() {
            return Err(Error::config(format!(
                "{} bandwidths but {} weights",
                bandwidths.len(),
                weights.len()
            )));
        }
        if let Some(s) = bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::config(format!("bandwidth must be positive, got {s}")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("kernel weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::config("kernel weights sum to zero"));
        }
        Ok(Self {
            bandwidths,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma], vec![1.0])
    }

    pub fn equal_weights(bandwidths: Vec<f64>) -> Result<Self> {
        let n = bandwidths.len();
        Self::new(bandwidths, vec![1.0; n])
    }

    /// `{σ/2, σ, 2σ}` with equal weights.
    pub fn around(sigma: f64) -> Result<Self> {
        Self::equal_weights(vec![sigma / 2.0, sigma, 2.0 * sigma])
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Kernel value for a squared distance.
    pub fn eval_sq(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * (-d2 / (2.0 * s * s)).exp())
            .sum()
    }
}

/// `[m×e]`, `[k×e]` -> `[m×k]` mixture-kernel Gram matrix.
pub fn kernel_matrix<'g>(x: Var<'g>, y: Var<'g>, spec: &KernelSpec) -> Result<Var<'g>> {
    let d2 = x.sq_euclidean_pairwise(y)?;
    let mut acc: Option<Var<'g>> = None;
    for (s, w) in spec.bandwidths.iter().zip(&spec.weights) {
        let term = d2.scale(-1.0 / (2.0 * s * s)).exp().scale(*w);
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("spec has at least one bandwidth"))
}

/// Biased squared MMD between the rows of `x` and `y`.
pub fn mmd2<'g>(x: Var<'g>, y: Var<'g>, spec: &KernelSpec) -> Result<Var<'g>> {
    for (name, v) in [("X", x), ("Y", y)] {
        if v.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Argument(format!("mmd2: {name} is empty")));
        }
    }
    let kxx = kernel_matrix(x, x, spec)?.mean();
    let kyy = kernel_matrix(y, y, spec)?.mean();
    let kxy = kernel_matrix(x, y, spec)?.mean();
    let raw = kxx.add(kyy)?.sub(kxy.scale(2.0))?;
    // Rounding can leave a tiny negative; shift the value, keep the gradient.
    let v = raw.item();
    Ok(if v < 0.0 { raw.add_scalar(-v) } else { raw })
}

/// Value-only [`mmd2`].
pub fn mmd2_value(x: &Tensor, y: &Tensor, spec: &KernelSpec) -> Result<f64> {
    let g = Graph::new();
    let (xv, yv) = (g.leaf(x), g.leaf(y));
    Ok(mmd2(xv, yv, spec)?.item())
}

/// Median nonzero pairwise Euclidean distance over the rows of `x ∪ y`.
///
/// Falls back to 1.0 (with a warning) when every point coincides.
pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (rows_x, e) = match *x.shape() {
        [m, e] => (m, e),
        ref s => return Err(Error::dim(format!("median_heuristic: X must be 2-D, got {s:?}"))),
    };
    let rows_y = match *y.shape() {
        [k, e2] if e2 == e => k,
        ref s => return Err(Error::dim(format!("median_heuristic: Y shape {s:?} vs X {:?}", x.shape()))),
    };
    let points: Vec<&[f64]> = (0..rows_x)
        .map(|i| x.row(i))
        .chain((0..rows_y).map(|i| y.row(i)))
        .collect();
    if points.len() < 2 {
        return Err(Error::Argument(
            "median_heuristic needs at least two points".into(),
        ));
    }
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2: f64 = points[i]
                .iter()
                .zip(points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    if dists.is_empty() {
        log::warn!("median_heuristic: all points identical, falling back to sigma = 1");
        return Ok(1.0);
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    Ok(if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(&[values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn diagonal_is_one() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::new(&[3, 2], vec![0.1, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap());
        let spec = KernelSpec::around(0.7).unwrap();
        let k = kernel_matrix(x, x, &spec).unwrap().value();
        for i in 0..3 {
            assert_eq!(k.at(&[i, i]), 1.0);
        }
    }

    #[test]
    fn scalar_kernel_hand_value() {
        let g = Graph::new();
        let k = kernel_matrix(g.leaf(&col(&[0.0])), g.leaf(&col(&[1.0])), &KernelSpec::single(1.0).unwrap())
            .unwrap()
            .item();
        assert!((k - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn hand_mmd() {
        let v = mmd2_value(&col(&[0.0]), &col(&[1.0]), &KernelSpec::single(1.0).unwrap()).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 0.78694).abs() < 1e-5);
    }

    #[test]
    fn self_distance_is_zero() {
        let x = Tensor::new(&[4, 2], vec![0.3, 1.0, -2.0, 0.1, 0.0, 0.0, 5.0, -1.0]).unwrap();
        let v = mmd2_value(&x, &x, &KernelSpec::around(1.3).unwrap()).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_rejected() {
        let x = Tensor::zeros(&[0, 2]);
        let y = Tensor::zeros(&[2, 2]);
        assert!(mmd2_value(&x, &y, &KernelSpec::single(1.0).unwrap()).is_err());
    }

    #[test]
    fn weights_are_normalized() {
        let s = KernelSpec::new(vec![1.0, 2.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(s.weights(), &[0.25, 0.75]);
        assert!(KernelSpec::new(vec![], vec![]).is_err());
        assert!(KernelSpec::new(vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn median_of_single_pair() {
        let x = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let y = Tensor::new(&[1, 2], vec![3.0, 0.0]).unwrap();
        assert_eq!(median_heuristic(&x, &y).unwrap(), 3.0);
    }

    #[test]
    fn median_identical_points_falls_back() {
        let x = Tensor::full(&[3, 2], 1.5);
        assert_eq!(median_heuristic(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn median_scales_with_data() {
        let x = Tensor::new(&[3, 1], vec![0.0, 1.0, 4.0]).unwrap();
        let y = Tensor::new(&[2, 1], vec![2.0, 7.0]).unwrap();
        let base = median_heuristic(&x, &y).unwrap();
        let scaled = |t: &Tensor| Tensor::new(t.shape(), t.data().iter().map(|v| v * 2.5).collect()).unwrap();
        let s = median_heuristic(&scaled(&x), &scaled(&y)).unwrap();
        assert!((s - 2.5 * base).abs() < 1e-12);
    }
}
