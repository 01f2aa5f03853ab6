//! Fused network layers with hand-written backward passes.

use serde::{Deserialize, Serialize};

use super::ops::gemm_into;
use super::{BackwardCtx, Var};
use crate::error::{Error, Result};

/// Added to the variance before the square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running averages.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// `Train` normalizes with batch statistics and updates the running averages;
/// `Eval` normalizes with the running averages and leaves them alone.
#[derive(Debug)]
pub enum BatchNormMode<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

/// Splits a `[B×C×...]` or `[C×...]` shape into (batch, channels, spatial).
fn conv_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(Error::dim(format!(
            "expected [C×H×W] or [B×C×H×W], got {shape:?}"
        ))),
    }
}

/// Output positions `o` with `0 <= o*stride + offset - pad < len`, clipped to `0..out_len`.
fn valid_range(len: usize, out_len: usize, offset: usize, pad: usize, stride: usize) -> (usize, usize) {
    let shift = offset as i64 - pad as i64;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(stride)
    };
    let top = len as i64 - 1 - shift;
    let hi = if top < 0 {
        0
    } else {
        (top as usize / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

impl<'g> Var<'g> {
    /// 2-D cross-correlation. `self` is `[C_in×H×W]` or `[B×C_in×H×W]`, `kernel` is
    /// `[C_out×C_in×kh×kw]`; no bias.
    pub fn conv2d(self, kernel: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        self.same_graph(kernel)?;
        let (b, c_in, h, w, batched) = conv_dims(&self.shape())?;
        let (c_out, kc, kh, kw) = match *kernel.shape() {
            [o, c, kh, kw] => (o, c, kh, kw),
            ref s => return Err(Error::dim(format!("conv2d: kernel must be 4-D, got {s:?}"))),
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d: input has {c_in} channels, kernel expects {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be positive"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::config(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {ph}×{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::config(format!(
                "conv2d: stride {stride} does not tile padded input {ph}×{pw} with kernel {kh}×{kw}"
            )));
        }
        let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);

        let geom = ConvGeom {
            b,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        };
        let g = self.graph;
        let value = g.with_values(&[self.id, kernel.id], |v| geom.forward(v[0], v[1]));
        let shape = if batched {
            vec![b, c_out, oh, ow]
        } else {
            vec![c_out, oh, ow]
        };
        Ok(g.record(
            shape,
            value,
            &[self.id, kernel.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (gx, gk) = geom.backward(
                    ctx.inputs[0],
                    ctx.inputs[1],
                    ctx.grad,
                    ctx.needs(0),
                    ctx.needs(1),
                );
                vec![gx, gk]
            }),
        ))
    }

    /// Per-channel batch normalization over `[B×C×H×W]` or `[B×C]`.
    pub fn batch_norm(self, gamma: Var<'g>, beta: Var<'g>, mode: BatchNormMode<'_>) -> Result<Var<'g>> {
        self.same_graph(gamma)?;
        self.same_graph(beta)?;
        let shape = self.shape();
        let (b, c, spatial) = match *shape {
            [b, c] => (b, c, 1),
            [b, c, h, w] => (b, c, h * w),
            _ => return Err(Error::dim(format!("batch_norm: unsupported shape {shape:?}"))),
        };
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(format!(
                "batch_norm: gamma/beta must be [{c}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let count = b * spatial;
        let idx = move |bi: usize, ci: usize, s: usize| (bi * c + ci) * spatial + s;

        let g = self.graph;
        let x: Vec<f64> = g.with_values(&[self.id], |v| v[0].to_vec());
        let (mean, var, train) = match &mode {
            BatchNormMode::Train(_) => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        for k in 0..spatial {
                            s += x[idx(bi, ci, k)];
                        }
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for bi in 0..b {
                        for k in 0..spatial {
                            let d = x[idx(bi, ci, k)] - m;
                            v += d * d;
                        }
                    }
                    mean[ci] = m;
                    var[ci] = v / count as f64;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval(rs) => {
                if rs.channels() != c {
                    return Err(Error::dim(format!(
                        "batch_norm: running stats for {} channels, input has {c}",
                        rs.channels()
                    )));
                }
                (rs.mean.clone(), rs.var.clone(), false)
            }
        };
        if let BatchNormMode::Train(rs) = mode {
            if rs.channels() != c {
                return Err(Error::dim(format!(
                    "batch_norm: running stats for {} channels, input has {c}",
                    rs.channels()
                )));
            }
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for ci in 0..c {
                rs.mean[ci] = (1.0 - BN_MOMENTUM) * rs.mean[ci] + BN_MOMENTUM * mean[ci];
                rs.var[ci] = (1.0 - BN_MOMENTUM) * rs.var[ci] + BN_MOMENTUM * var[ci] * unbias;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                for k in 0..spatial {
                    let i = idx(bi, ci, k);
                    xhat[i] = (x[i] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let value = g.with_values(&[gamma.id, beta.id], |v| {
            let mut out = vec![0.0; x.len()];
            for bi in 0..b {
                for ci in 0..c {
                    for k in 0..spatial {
                        let i = idx(bi, ci, k);
                        out[i] = v[0][ci] * xhat[i] + v[1][ci];
                    }
                }
            }
            out
        });
        Ok(g.record(
            shape,
            value,
            &[self.id, gamma.id, beta.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let gamma = ctx.inputs[1];
                let gy = ctx.grad;
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; gy.len()];
                for ci in 0..c {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for bi in 0..b {
                        for k in 0..spatial {
                            let i = idx(bi, ci, k);
                            sum_g += gy[i];
                            sum_gx += gy[i] * xhat[i];
                        }
                    }
                    ggamma[ci] = sum_gx;
                    gbeta[ci] = sum_g;
                    if !ctx.needs(0) {
                        continue;
                    }
                    let scale = gamma[ci] * inv_std[ci];
                    let n = count as f64;
                    for bi in 0..b {
                        for k in 0..spatial {
                            let i = idx(bi, ci, k);
                            gx[i] = if train {
                                scale * (gy[i] - sum_g / n - xhat[i] * sum_gx / n)
                            } else {
                                scale * gy[i]
                            };
                        }
                    }
                }
                vec![ctx.needs(0).then_some(gx), Some(ggamma), Some(gbeta)]
            }),
        ))
    }

    /// `[B×C×H×W] -> [B×C]` spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'g>> {
        let shape = self.shape();
        let (b, c, spatial) = match *shape {
            [b, c, h, w] => (b, c, h * w),
            _ => return Err(Error::dim(format!("global_avg_pool: need 4-D, got {shape:?}"))),
        };
        let g = self.graph;
        let value = g.with_values(&[self.id], |v| {
            v[0].chunks(spatial)
                .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
                .collect()
        });
        Ok(g.record(
            vec![b, c],
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let gx = ctx
                    .grad
                    .iter()
                    .flat_map(|&gy| std::iter::repeat_n(gy / spatial as f64, spatial))
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }

    /// Electrode-interaction transform. `self` is `[n×d]` or `[B×n×d]`, `proj` is
    /// `[c×g×g]` with `g = d / c`. Channel `k` is `Z_k Z_kᵀ / g` where `Z_k` is the
    /// `k`-th block of `g` feature columns multiplied by `proj[k]`.
    pub fn g2g(self, proj: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(proj)?;
        let xs = self.shape();
        let (b, n, d, batched) = match *xs {
            [n, d] => (1, n, d, false),
            [b, n, d] => (b, n, d, true),
            _ => return Err(Error::dim(format!("g2g: expected [n×d] or [B×n×d], got {xs:?}"))),
        };
        let (c, gsz) = match *proj.shape() {
            [c, g1, g2] if g1 == g2 => (c, g1),
            ref s => return Err(Error::dim(format!("g2g: projection must be [c×g×g], got {s:?}"))),
        };
        if c == 0 || d % c != 0 {
            return Err(Error::config(format!(
                "g2g: feature dim {d} not divisible by {c} channels"
            )));
        }
        if d / c != gsz {
            return Err(Error::dim(format!(
                "g2g: group width {} but projection is {gsz}×{gsz}",
                d / c
            )));
        }
        let inv_g = 1.0 / gsz as f64;
        // z[b][k][i][t] = Σ_s x[b, i, k*g + s] · P[k, s, t]
        let project = move |x: &[f64], p: &[f64]| -> Vec<f64> {
            let mut z = vec![0.0; b * c * n * gsz];
            for bi in 0..b {
                for k in 0..c {
                    for i in 0..n {
                        let zrow = &mut z[((bi * c + k) * n + i) * gsz..][..gsz];
                        for s in 0..gsz {
                            let xv = x[(bi * n + i) * d + k * gsz + s];
                            let prow = &p[(k * gsz + s) * gsz..][..gsz];
                            for (zv, pv) in zrow.iter_mut().zip(prow) {
                                *zv += xv * pv;
                            }
                        }
                    }
                }
            }
            z
        };
        let g = self.graph;
        let value = g.with_values(&[self.id, proj.id], |v| {
            let z = project(v[0], v[1]);
            let mut out = vec![0.0; b * c * n * n];
            for bk in 0..b * c {
                let zb = &z[bk * n * gsz..][..n * gsz];
                for i in 0..n {
                    for j in i..n {
                        let dot: f64 = zb[i * gsz..(i + 1) * gsz]
                            .iter()
                            .zip(&zb[j * gsz..(j + 1) * gsz])
                            .map(|(a, b)| a * b)
                            .sum();
                        out[(bk * n + i) * n + j] = dot * inv_g;
                        out[(bk * n + j) * n + i] = dot * inv_g;
                    }
                }
            }
            out
        });
        let shape = if batched {
            vec![b, c, n, n]
        } else {
            vec![c, n, n]
        };
        Ok(g.record(
            shape,
            value,
            &[self.id, proj.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (x, p) = (ctx.inputs[0], ctx.inputs[1]);
                let z = project(x, p);
                let go = ctx.grad;
                // gz[b,k,i,t] = (1/g) Σ_j (G[i,j] + G[j,i]) z[j,t]
                let mut gz = vec![0.0; z.len()];
                for bk in 0..b * c {
                    let zb = &z[bk * n * gsz..][..n * gsz];
                    let gob = &go[bk * n * n..][..n * n];
                    let gzb = &mut gz[bk * n * gsz..][..n * gsz];
                    for i in 0..n {
                        for j in 0..n {
                            let w = (gob[i * n + j] + gob[j * n + i]) * inv_g;
                            if w == 0.0 {
                                continue;
                            }
                            for t in 0..gsz {
                                gzb[i * gsz + t] += w * zb[j * gsz + t];
                            }
                        }
                    }
                }
                let mut gx = ctx.needs(0).then(|| vec![0.0; x.len()]);
                let mut gp = ctx.needs(1).then(|| vec![0.0; p.len()]);
                for bi in 0..b {
                    for k in 0..c {
                        for i in 0..n {
                            let gzr = &gz[((bi * c + k) * n + i) * gsz..][..gsz];
                            for s in 0..gsz {
                                let xi = (bi * n + i) * d + k * gsz + s;
                                let prow = (k * gsz + s) * gsz;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] = gzr
                                        .iter()
                                        .zip(&p[prow..prow + gsz])
                                        .map(|(a, b)| a * b)
                                        .sum();
                                }
                                if let Some(gp) = gp.as_mut() {
                                    let xv = x[xi];
                                    for t in 0..gsz {
                                        gp[prow + t] += xv * gzr[t];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gp]
            }),
        ))
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn x_at(&self, bi: usize, ci: usize, y: usize, x: usize) -> usize {
        ((bi * self.c_in + ci) * self.h + y) * self.w + x
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits `(col_row, out_pos, in_index)` for every non-padding patch entry of
    /// sample `bi`, where `col_row` indexes `(ci, ky, kx)`.
    #[inline]
    fn for_each_patch(&self, bi: usize, mut f: impl FnMut(usize, usize, usize)) {
        let s = self.stride;
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                let (y0, y1) = valid_range(self.h, self.oh, ky, self.pad, s);
                for kx in 0..self.kw {
                    let (x0, x1) = valid_range(self.w, self.ow, kx, self.pad, s);
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - self.pad;
                        for ox in x0..x1 {
                            let ix = ox * s + kx - self.pad;
                            f(r, oy * self.ow + ox, self.x_at(bi, ci, iy, ix));
                        }
                    }
                }
            }
        }
    }

    /// Unfolds sample `bi` into a `[C_in·kh·kw × oh·ow]` patch matrix.
    fn im2col(&self, x: &[f64], bi: usize, col: &mut [f64]) {
        col.fill(0.0);
        let l = self.out_len();
        self.for_each_patch(bi, |r, o, i| col[r * l + o] = x[i]);
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (pk, l) = (self.patch_len(), self.out_len());
        let per = self.c_out * l;
        let mut out = vec![0.0; self.b * per];
        let mut col = vec![0.0; pk * l];
        for bi in 0..self.b {
            self.im2col(x, bi, &mut col);
            gemm_into(&mut out[bi * per..(bi + 1) * per], k, false, &col, false, self.c_out, pk, l);
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        k: &[f64],
        gy: &[f64],
        need_x: bool,
        need_k: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let (pk, l) = (self.patch_len(), self.out_len());
        let per = self.c_out * l;
        let mut gx = need_x.then(|| vec![0.0; x.len()]);
        let mut gk = need_k.then(|| vec![0.0; k.len()]);
        let mut col = vec![0.0; pk * l];
        for bi in 0..self.b {
            let gyb = &gy[bi * per..(bi + 1) * per];
            if let Some(gk) = gk.as_mut() {
                self.im2col(x, bi, &mut col);
                gemm_into(gk, gyb, false, &col, true, self.c_out, l, pk);
            }
            if let Some(gx) = gx.as_mut() {
                col.fill(0.0);
                gemm_into(&mut col, k, true, gyb, false, pk, self.c_out, l);
                self.for_each_patch(bi, |r, o, i| gx[i] += col[r * l + o]);
            }
        }
        (gx, gk)
    }
}
