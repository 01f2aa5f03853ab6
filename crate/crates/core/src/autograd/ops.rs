use super::{BackwardCtx, Var};
use crate::error::{Error, Result};

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dim(format!("{op}: shapes {a:?} and {b:?} differ")))
    }
}

fn as_matrix(op: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [m, n] => Ok((m, n)),
        _ => Err(Error::dim(format!("{op}: expected a 2-D tensor, got {shape:?}"))),
    }
}

/// `out += op(a) · op(b)` where `op(a)` is `m×k`, `op(b)` is `k×p`, all row-major;
/// `ta`/`tb` read the stored buffer as transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(out: &mut [f64], a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, k: usize, p: usize) {
    debug_assert_eq!(out.len(), m * p);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    if m == 0 || p == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (p as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×p and m×p row-major
    // buffers whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            p,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

/// Plain `m×k · k×p` product on row-major buffers.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    gemm_into(&mut out, a, false, b, false, m, k, p);
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl<'g> Var<'g> {
    fn unary(self, f: impl Fn(f64) -> f64, df: fn(x: f64, y: f64) -> f64) -> Var<'g> {
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| v[0].iter().map(|&x| f(x)).collect());
        g.record(
            self.shape(),
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let gx = ctx.inputs[0]
                    .iter()
                    .zip(ctx.out)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &gy)| gy * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| v[0].iter().map(|x| x * c).collect());
        g.record(
            self.shape(),
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                vec![Some(ctx.grad.iter().map(|gy| gy * c).collect())]
            }),
        )
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| v[0].iter().map(|x| x + c).collect());
        g.record(
            self.shape(),
            value,
            &[self.id],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())]),
        )
    }

    fn binary(
        self,
        op: &str,
        other: Var<'g>,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let shape = self.shape();
        same_shape(op, &shape, &other.shape())?;
        let g = self.graph;
        let value = g.with_values(&[self.id, other.id], |v| {
            v[0].iter().zip(v[1]).map(|(&a, &b)| f(a, b)).collect()
        });
        Ok(g.record(
            shape,
            value,
            &[self.id, other.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let grad_for = |d: fn(f64, f64) -> f64| -> Vec<f64> {
                    ctx.grad
                        .iter()
                        .zip(a.iter().zip(b))
                        .map(|(gy, (&x, &y))| gy * d(x, y))
                        .collect()
                };
                vec![
                    ctx.needs(0).then(|| grad_for(da)),
                    ctx.needs(1).then(|| grad_for(db)),
                ]
            }),
        ))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary("add", other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary("sub", other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary("mul", other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Adds `bias` broadcast over the leading axes; `bias.shape()` must be a suffix of `self.shape()`.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(bias)?;
        let shape = self.shape();
        let bshape = bias.shape();
        if bshape.len() > shape.len() || shape[shape.len() - bshape.len()..] != bshape[..] {
            return Err(Error::dim(format!(
                "add_bias: bias {bshape:?} does not match trailing axes of {shape:?}"
            )));
        }
        let n: usize = bshape.iter().product();
        let g = self.graph;
        let value = g.with_values(&[self.id, bias.id], |v| {
            v[0].iter()
                .enumerate()
                .map(|(i, x)| x + v[1][i % n])
                .collect()
        });
        Ok(g.record(
            shape,
            value,
            &[self.id, bias.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let gb = ctx.needs(1).then(|| {
                    let mut gb = vec![0.0; n];
                    for (i, gy) in ctx.grad.iter().enumerate() {
                        gb[i % n] += gy;
                    }
                    gb
                });
                vec![ctx.needs(0).then(|| ctx.grad.to_vec()), gb]
            }),
        ))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let (m, k) = as_matrix("matmul", &self.shape())?;
        let (k2, p) = as_matrix("matmul", &other.shape())?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions {m}x{k} and {k2}x{p} disagree"
            )));
        }
        let g = self.graph;
        let value = g.with_values(&[self.id, other.id], |v| matmul_raw(v[0], v[1], m, k, p));
        Ok(g.record(
            vec![m, p],
            value,
            &[self.id, other.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx
                    .needs(0)
                    .then(|| {
                        let mut o = vec![0.0; m * k];
                        gemm_into(&mut o, ctx.grad, false, b, true, m, p, k);
                        o
                    });
                let gb = ctx
                    .needs(1)
                    .then(|| {
                        let mut o = vec![0.0; k * p];
                        gemm_into(&mut o, a, true, ctx.grad, false, k, m, p);
                        o
                    });
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let (m, n) = as_matrix("transpose", &self.shape())?;
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| transpose_raw(v[0], m, n));
        Ok(g.record(
            vec![n, m],
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(transpose_raw(ctx.grad, n, m))]),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::dim(format!(
                "reshape: {:?} into {shape:?}",
                self.shape()
            )));
        }
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| v[0].to_vec());
        Ok(g.record(
            shape.to_vec(),
            value,
            &[self.id],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'g>> {
        let (m, n) = as_matrix("slice_rows", &self.shape())?;
        if start > end || end > m {
            return Err(Error::dim(format!("slice_rows: {start}..{end} out of 0..{m}")));
        }
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| v[0][start * n..end * n].to_vec());
        Ok(g.record(
            vec![end - start, n],
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut gx = vec![0.0; m * n];
                gx[start * n..end * n].copy_from_slice(ctx.grad);
                vec![Some(gx)]
            }),
        ))
    }

    /// Stacks `[m×p]` and `[m×q]` side by side into `[m×(p+q)]`.
    pub fn concat_cols(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let (m, p) = as_matrix("concat_cols", &self.shape())?;
        let (m2, q) = as_matrix("concat_cols", &other.shape())?;
        if m != m2 {
            return Err(Error::dim(format!("concat_cols: {m} vs {m2} rows")));
        }
        let g = self.graph;
        let value = g.with_values(&[self.id, other.id], |v| {
            let mut out = Vec::with_capacity(m * (p + q));
            for i in 0..m {
                out.extend_from_slice(&v[0][i * p..(i + 1) * p]);
                out.extend_from_slice(&v[1][i * q..(i + 1) * q]);
            }
            out
        });
        Ok(g.record(
            vec![m, p + q],
            value,
            &[self.id, other.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let w = p + q;
                let ga = (0..m)
                    .flat_map(|i| ctx.grad[i * w..i * w + p].iter().copied())
                    .collect();
                let gb = (0..m)
                    .flat_map(|i| ctx.grad[i * w + p..(i + 1) * w].iter().copied())
                    .collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn sum(self) -> Var<'g> {
        let g = self.graph;
        let n = self.len();
        let value = g.with_values(&[self.id], |v| vec![v[0].iter().sum()]);
        g.record(
            Vec::new(),
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    fn rows_cols(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape().as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(format!("{op}: expected 1-D or 2-D, got {s:?}"))),
        }
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g>> {
        let (m, n) = self.rows_cols("softmax")?;
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| {
            let mut out = v[0].to_vec();
            for row in out.chunks_mut(n) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                row.iter_mut().for_each(|x| *x /= z);
            }
            out
        });
        Ok(g.record(
            self.shape(),
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let y = &ctx.out[i * n..(i + 1) * n];
                    let gy = &ctx.grad[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = y[j] * (gy[j] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise `x - logsumexp(x)` over the last axis.
    pub fn log_softmax(self) -> Result<Var<'g>> {
        let (m, n) = self.rows_cols("log_softmax")?;
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| {
            let mut out = v[0].to_vec();
            for row in out.chunks_mut(n) {
                let lse = logsumexp(row);
                row.iter_mut().for_each(|x| *x -= lse);
            }
            out
        });
        Ok(g.record(
            self.shape(),
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let y = &ctx.out[i * n..(i + 1) * n];
                    let gy = &ctx.grad[i * n..(i + 1) * n];
                    let total: f64 = gy.iter().sum();
                    for j in 0..n {
                        gx[i * n + j] = gy[j] - y[j].exp() * total;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `out[i, c] = log Σ_{j : segment[j] == c} exp(x[i, j])` for a 2-D `x`.
    ///
    /// Every segment id in `0..num_segments` must occur at least once.
    pub fn segment_logsumexp(self, segment: &[usize], num_segments: usize) -> Result<Var<'g>> {
        let (m, n) = as_matrix("segment_logsumexp", &self.shape())?;
        if segment.len() != n {
            return Err(Error::dim(format!(
                "segment_logsumexp: {} segment ids for {n} columns",
                segment.len()
            )));
        }
        for c in 0..num_segments {
            if !segment.contains(&c) {
                return Err(Error::dim(format!("segment_logsumexp: segment {c} is empty")));
            }
        }
        if let Some(bad) = segment.iter().find(|&&s| s >= num_segments) {
            return Err(Error::dim(format!("segment_logsumexp: segment id {bad} out of range")));
        }
        let seg = segment.to_vec();
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| {
            let mut out = vec![0.0; m * num_segments];
            for i in 0..m {
                let row = &v[0][i * n..(i + 1) * n];
                for c in 0..num_segments {
                    let mx = row
                        .iter()
                        .zip(&seg)
                        .filter(|(_, &s)| s == c)
                        .map(|(&x, _)| x)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row
                        .iter()
                        .zip(&seg)
                        .filter(|(_, &s)| s == c)
                        .map(|(&x, _)| (x - mx).exp())
                        .sum();
                    out[i * num_segments + c] = mx + z.ln();
                }
            }
            out
        });
        Ok(g.record(
            vec![m, num_segments],
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let x = ctx.inputs[0];
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let o = i * num_segments + seg[j];
                        gx[i * n + j] = ctx.grad[o] * (x[i * n + j] - ctx.out[o]).exp();
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Divides each row of a 2-D tensor by `sqrt(|row|² + 1e-12)`.
    pub fn l2_normalize_rows(self) -> Result<Var<'g>> {
        const EPS: f64 = 1e-12;
        let (m, n) = as_matrix("l2_normalize_rows", &self.shape())?;
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| {
            let mut out = v[0].to_vec();
            for row in out.chunks_mut(n) {
                let norm = (row.iter().map(|x| x * x).sum::<f64>() + EPS).sqrt();
                row.iter_mut().for_each(|x| *x /= norm);
            }
            out
        });
        Ok(g.record(
            vec![m, n],
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let x = ctx.inputs[0];
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let xr = &x[i * n..(i + 1) * n];
                    let gr = &ctx.grad[i * n..(i + 1) * n];
                    let norm = (xr.iter().map(|v| v * v).sum::<f64>() + EPS).sqrt();
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let n3 = norm * norm * norm;
                    for j in 0..n {
                        gx[i * n + j] = gr[j] / norm - xr[j] * dot / n3;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Squared Euclidean distances between the rows of `[m×d]` and `[k×d]`, giving `[m×k]`.
    ///
    /// Computed from explicit differences, so `D(X, X)` has an exactly-zero diagonal.
    pub fn sq_euclidean_pairwise(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let (m, d) = as_matrix("sq_euclidean_pairwise", &self.shape())?;
        let (k, d2) = as_matrix("sq_euclidean_pairwise", &other.shape())?;
        if d != d2 {
            return Err(Error::dim(format!(
                "sq_euclidean_pairwise: feature dims {d} and {d2} differ"
            )));
        }
        let g = self.graph;
        let value = g.with_values(&[self.id, other.id], |v| {
            let mut out = vec![0.0; m * k];
            for i in 0..m {
                let x = &v[0][i * d..(i + 1) * d];
                for j in 0..k {
                    let y = &v[1][j * d..(j + 1) * d];
                    out[i * k + j] = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                }
            }
            out
        });
        Ok(g.record(
            vec![m, k],
            value,
            &[self.id, other.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (xs, ys) = (ctx.inputs[0], ctx.inputs[1]);
                let mut gx = vec![0.0; m * d];
                let mut gy = vec![0.0; k * d];
                for i in 0..m {
                    for j in 0..k {
                        let c = 2.0 * ctx.grad[i * k + j];
                        if c == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = c * (xs[i * d + t] - ys[j * d + t]);
                            gx[i * d + t] += diff;
                            gy[j * d + t] -= diff;
                        }
                    }
                }
                vec![ctx.needs(0).then_some(gx), ctx.needs(1).then_some(gy)]
            }),
        ))
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use crate::autograd::Graph;
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let g = Graph::new();
        let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(&t(&[2, 1], &[0.0, 1.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let a_data: Vec<f64> = (0..9).map(|i| i as f64 * 0.7 - 2.0).collect();
        let a = g.leaf(&t(&[3, 3], &a_data));
        let i3 = g.leaf(&Tensor::eye(3));
        assert_eq!(i3.matmul(a).unwrap().value().data(), a_data.as_slice());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::full(&[2, 4], 3.3));
        let y = x.softmax().unwrap().value();
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pairwise_hand_case() {
        let g = Graph::new();
        let x = g.leaf(&t(&[1, 2], &[0.0, 0.0]));
        let y = g.leaf(&t(&[1, 2], &[3.0, 4.0]));
        assert_eq!(x.sq_euclidean_pairwise(y).unwrap().value().data(), &[25.0]);
    }

    #[test]
    fn relu_clamps_negatives_only() {
        let g = Graph::new();
        let x = g.leaf(&t(&[4], &[-2.0, -0.1, 0.0, 1.5]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 0.0, 1.5]);
    }

    #[test]
    fn segment_logsumexp_matches_direct_log_of_sums() {
        let g = Graph::new();
        let x = g.leaf(&t(&[1, 4], &[0.1, -0.3, 0.7, 0.2]));
        let out = x.segment_logsumexp(&[0, 1, 0, 1], 2).unwrap().value();
        let e = |v: f64| v.exp();
        assert!((out.data()[0] - (e(0.1) + e(0.7)).ln()).abs() < 1e-14);
        assert!((out.data()[1] - (e(-0.3) + e(0.2)).ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_segment_is_rejected() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[1, 2]));
        assert!(x.segment_logsumexp(&[0, 0], 2).is_err());
    }
}
