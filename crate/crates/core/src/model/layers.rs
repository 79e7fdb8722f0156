//! Forward and backward passes for the building blocks. Each `forward`
//! returns whatever its `backward` needs; gradients accumulate into a
//! parameter-shaped struct.

use super::params::{Attention, FeedForward, LayerNorm, Linear};
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, softmax_in_place, Mat, Real};

const LN_EPS: f64 = 1e-5;

impl<T: Real> Linear<T> {
    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = matmul(x, &self.w);
        y.add_row_broadcast(&self.b);
        y
    }

    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) -> Mat<T> {
        matmul_tn_acc(x, dy, &mut grad.w);
        dy.sum_rows_into(&mut grad.b);
        matmul_nt(dy, &self.w)
    }

    /// Weight-only backward, for inputs that need no gradient.
    pub fn backward_params(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) {
        matmul_tn_acc(x, dy, &mut grad.w);
        dy.sum_rows_into(&mut grad.b);
    }
}

pub struct NormCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, NormCache<T>) {
        let d = x.cols;
        let eps = T::of(LN_EPS);
        let n = T::of(d as f64);
        let mut xhat = Mat::zeros(x.rows, d);
        let mut y = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xr = xhat.row_mut(r);
            for (o, &v) in xr.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            let yr = y.row_mut(r);
            for c in 0..d {
                yr[c] = xhat.data[r * d + c] * self.gain.data[c] + self.bias.data[c];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Mat<T>, grad: &mut LayerNorm<T>) -> Mat<T> {
        let d = dy.cols;
        let n = T::of(d as f64);
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                grad.gain.data[c] = grad.gain.data[c] + dyr[c] * xh[c];
                grad.bias.data[c] = grad.bias.data[c] + dyr[c];
                dxhat[c] = dyr[c] * self.gain.data[c];
            }
            let mean_d = dxhat.iter().copied().sum::<T>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
            let inv = cache.inv_std[r];
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }
}

pub struct FeedForwardCache<T> {
    hidden: Mat<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, FeedForwardCache<T>) {
        let mut hidden = self.up.forward(x);
        hidden.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let y = self.down.forward(&hidden);
        (y, FeedForwardCache { hidden })
    }

    pub fn backward(
        &self,
        x: &Mat<T>,
        cache: &FeedForwardCache<T>,
        dy: &Mat<T>,
        grad: &mut FeedForward<T>,
    ) -> Mat<T> {
        let mut dh = self.down.backward(&cache.hidden, dy, &mut grad.down);
        for (g, &h) in dh.data.iter_mut().zip(&cache.hidden.data) {
            if h <= T::zero() {
                *g = T::zero();
            }
        }
        self.up.backward(x, &dh, &mut grad.up)
    }
}

pub struct AttentionCache<T> {
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Per head, `rows_q × rows_kv` attention probabilities.
    pub probs: Vec<Mat<T>>,
    context: Mat<T>,
}

impl<T: Real> Attention<T> {
    /// Multi-head scaled dot-product attention. With `causal`, query `i`
    /// sees keys `0..=i`.
    pub fn forward(
        &self,
        xq: &Mat<T>,
        xkv: &Mat<T>,
        heads: usize,
        causal: bool,
    ) -> (Mat<T>, AttentionCache<T>) {
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let (context, probs) = attend(&q, &k, &v, heads, causal);
        let out = self.o.forward(&context);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    /// Returns `(d_xq, d_xkv)`.
    pub fn backward(
        &self,
        xq: &Mat<T>,
        xkv: &Mat<T>,
        cache: &AttentionCache<T>,
        dout: &Mat<T>,
        heads: usize,
        grad: &mut Attention<T>,
    ) -> (Mat<T>, Mat<T>) {
        let dcontext = self.o.backward(&cache.context, dout, &mut grad.o);
        let d = cache.q.cols;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = Mat::zeros(cache.q.rows, d);
        let mut dk = Mat::zeros(cache.k.rows, d);
        let mut dv = Mat::zeros(cache.v.rows, d);
        for h in 0..heads {
            let start = h * dh;
            let qh = cache.q.col_block(start, dh);
            let kh = cache.k.col_block(start, dh);
            let vh = cache.v.col_block(start, dh);
            let p = &cache.probs[h];
            let dc = dcontext.col_block(start, dh);
            // context = P·V
            let mut dp = matmul_nt(&dc, &vh);
            let mut dvh = Mat::zeros(vh.rows, dh);
            matmul_tn_acc(p, &dc, &mut dvh);
            // softmax backward, scaled
            for r in 0..dp.rows {
                let pr = p.row(r);
                let dpr = dp.row_mut(r);
                let dot: T = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dpr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            let dqh = matmul(&dp, &kh);
            let mut dkh = Mat::zeros(kh.rows, dh);
            matmul_tn_acc(&dp, &qh, &mut dkh);
            dq.add_col_block(start, &dqh);
            dk.add_col_block(start, &dkh);
            dv.add_col_block(start, &dvh);
        }
        let dxq = self.q.backward(xq, &dq, &mut grad.q);
        let mut dxkv = self.k.backward(xkv, &dk, &mut grad.k);
        dxkv.add_assign(&self.v.backward(xkv, &dv, &mut grad.v));
        (dxq, dxkv)
    }
}

/// Core of multi-head attention on projected `q`, `k`, `v`. Returns the
/// concatenated head outputs and per-head probabilities.
pub fn attend<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    heads: usize,
    causal: bool,
) -> (Mat<T>, Vec<Mat<T>>) {
    let d = q.cols;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut context = Mat::zeros(q.rows, d);
    let mut probs = Vec::with_capacity(heads);
    // Offset for causal masking when queries are the tail of the keys.
    let offset = k.rows - q.rows.min(k.rows);
    for h in 0..heads {
        let start = h * dh;
        let qh = q.col_block(start, dh);
        let kh = k.col_block(start, dh);
        let vh = v.col_block(start, dh);
        let mut s = matmul_nt(&qh, &kh);
        for r in 0..s.rows {
            let row = s.row_mut(r);
            let visible = if causal { offset + r + 1 } else { row.len() };
            for x in row[..visible].iter_mut() {
                *x = *x * scale;
            }
            softmax_in_place(&mut row[..visible]);
            for x in row[visible..].iter_mut() {
                *x = T::zero();
            }
        }
        context.add_col_block(start, &matmul(&s, &vh));
        probs.push(s);
    }
    (context, probs)
}

/// Attention of a single query row over every key. Returns the context
/// row and the head-averaged probabilities.
pub fn attend_row<T: Real>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, heads: usize) -> (Mat<T>, Vec<f64>) {
    let d = q.cols;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let n = k.rows;
    let mut context = Mat::zeros(1, d);
    let mut mean = vec![0.0; n];
    let mut p = vec![T::zero(); n];
    for h in 0..heads {
        let start = h * dh;
        let qh = &q.data[start..start + dh];
        for (j, pj) in p.iter_mut().enumerate() {
            let kj = &k.row(j)[start..start + dh];
            *pj = qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
        }
        softmax_in_place(&mut p);
        let ctx = &mut context.data[start..start + dh];
        for (j, &pj) in p.iter().enumerate() {
            mean[j] += pj.as_f64();
            for (c, &vv) in ctx.iter_mut().zip(&v.row(j)[start..start + dh]) {
                *c = *c + pj * vv;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= heads as f64);
    (context, mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(inp: usize, out: usize, salt: f64) -> Linear<f64> {
        let w = (0..inp * out).map(|i| ((i as f64 + salt) * 0.731).sin() * 0.4).collect();
        let b = (0..out).map(|i| ((i as f64 + salt) * 1.37).cos() * 0.1).collect();
        Linear {
            w: Mat::from_vec(inp, out, w),
            b: Mat::from_vec(1, out, b),
        }
    }

    fn input(rows: usize, cols: usize, salt: f64) -> Mat<f64> {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| (i as f64 * 0.91 + salt).sin()).collect(),
        )
    }

    fn zero_attn(d: usize) -> Attention<f64> {
        let z = || Linear {
            w: Mat::zeros(d, d),
            b: Mat::zeros(1, d),
        };
        Attention {
            q: z(),
            k: z(),
            v: z(),
            o: z(),
        }
    }

    // Scalar objective: sum of outputs weighted by a fixed pattern.
    fn objective(y: &Mat<f64>) -> f64 {
        y.data.iter().enumerate().map(|(i, v)| v * ((i as f64) * 0.3).cos()).sum()
    }

    fn upstream(y: &Mat<f64>) -> Mat<f64> {
        Mat::from_vec(y.rows, y.cols, (0..y.len()).map(|i| ((i as f64) * 0.3).cos()).collect())
    }

    #[test]
    fn attention_input_gradient_matches_finite_differences() {
        let d = 8;
        let attn = Attention {
            q: lin(d, d, 0.1),
            k: lin(d, d, 0.2),
            v: lin(d, d, 0.3),
            o: lin(d, d, 0.4),
        };
        let xq = input(3, d, 0.5);
        let xkv = input(5, d, 1.5);
        for causal in [false, true] {
            let xkv_use = if causal { &xq } else { &xkv };
            let (y, cache) = attn.forward(&xq, xkv_use, 2, causal);
            let mut grad = zero_attn(d);
            let (dxq, dxkv) = attn.backward(&xq, xkv_use, &cache, &upstream(&y), 2, &mut grad);
            let h = 1e-6;
            for idx in [0, 5, 11, 20] {
                let mut plus = xq.clone();
                plus.data[idx] += h;
                let mut minus = xq.clone();
                minus.data[idx] -= h;
                let f = |x: &Mat<f64>| {
                    let kv = if causal { x } else { &xkv };
                    objective(&attn.forward(x, kv, 2, causal).0)
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let analytic = if causal {
                    dxq.data[idx] + dxkv.data[idx]
                } else {
                    dxq.data[idx]
                };
                assert!((fd - analytic).abs() < 1e-6, "causal={causal} idx={idx}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let d = 6;
        let ln = LayerNorm {
            gain: input(1, d, 0.2),
            bias: input(1, d, 0.9),
        };
        let x = input(2, d, 0.0);
        let (y, cache) = ln.forward(&x);
        let mut grad = LayerNorm {
            gain: Mat::zeros(1, d),
            bias: Mat::zeros(1, d),
        };
        let dx = ln.backward(&cache, &upstream(&y), &mut grad);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut p = x.clone();
            p.data[idx] += h;
            let mut m = x.clone();
            m.data[idx] -= h;
            let fd = (objective(&ln.forward(&p).0) - objective(&ln.forward(&m).0)) / (2.0 * h);
            assert!((fd - dx.data[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_rows_are_normalized_and_masked() {
        let d = 4;
        let attn = Attention {
            q: lin(d, d, 0.1),
            k: lin(d, d, 0.2),
            v: lin(d, d, 0.3),
            o: lin(d, d, 0.4),
        };
        let x = input(5, d, 0.3);
        let (_, cache) = attn.forward(&x, &x, 2, true);
        for p in &cache.probs {
            for r in 0..5 {
                let row = p.row(r);
                let s: f64 = row[..=r].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row[r + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }
}
