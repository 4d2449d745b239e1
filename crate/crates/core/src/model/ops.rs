//! Row-major dense kernels with explicit backward passes.
//!
//! Every forward kernel computes each output row from the matching input row
//! only, with a fixed summation order, so a row's value does not depend on how
//! many rows follow it.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + FromPrimitive + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + Default + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn cst<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

pub const LN_EPS: f64 = 1e-5;

#[inline]
fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// out[t, n] = x[t, k] · w[k, n] (+ b[n])
pub fn matmul<F: Scalar>(out: &mut [F], x: &[F], w: &[F], b: Option<&[F]>, rows: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(w.len(), k * n);
    for (orow, xrow) in out[..rows * n].chunks_exact_mut(n).zip(x.chunks_exact(k)) {
        match b {
            Some(b) => orow.copy_from_slice(b),
            None => orow.fill(F::zero()),
        }
        for (kk, &a) in xrow.iter().enumerate() {
            if a != F::zero() {
                axpy(orow, a, &w[kk * n..(kk + 1) * n]);
            }
        }
    }
}

/// Accumulates gradients of `out = x · w + b` given `dout`:
/// dx = dout · wᵀ (overwritten), dw += xᵀ · dout, db += Σ dout.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<F: Scalar>(
    dx: &mut [F],
    dw: &mut [F],
    db: Option<&mut [F]>,
    dout: &[F],
    x: &[F],
    w: &[F],
    rows: usize,
    k: usize,
    n: usize,
) {
    for (dxrow, drow) in dx[..rows * k].chunks_exact_mut(k).zip(dout.chunks_exact(n)) {
        for (kk, v) in dxrow.iter_mut().enumerate() {
            *v = dot(drow, &w[kk * n..(kk + 1) * n]);
        }
    }
    for (xrow, drow) in x.chunks_exact(k).zip(dout.chunks_exact(n)).take(rows) {
        for (kk, &a) in xrow.iter().enumerate() {
            if a != F::zero() {
                axpy(&mut dw[kk * n..(kk + 1) * n], a, drow);
            }
        }
    }
    if let Some(db) = db {
        for drow in dout.chunks_exact(n).take(rows) {
            for (g, &d) in db.iter_mut().zip(drow) {
                *g += d;
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache<F> {
    pub out: Vec<F>,
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layernorm<F: Scalar>(x: &[F], gamma: &[F], beta: &[F], rows: usize, d: usize) -> LayerNormCache<F> {
    let mut cache = LayerNormCache {
        out: vec![F::zero(); rows * d],
        xhat: vec![F::zero(); rows * d],
        rstd: vec![F::zero(); rows],
    };
    let n = cst::<F>(d as f64);
    let eps = cst::<F>(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rstd = F::one() / (var + eps).sqrt();
        cache.rstd[r] = rstd;
        for i in 0..d {
            let h = (xr[i] - mean) * rstd;
            cache.xhat[r * d + i] = h;
            cache.out[r * d + i] = h * gamma[i] + beta[i];
        }
    }
    cache
}

/// Adds the input gradient into `dx` and parameter gradients into `dgamma`/`dbeta`.
pub fn layernorm_backward<F: Scalar>(
    dx: &mut [F],
    dgamma: &mut [F],
    dbeta: &mut [F],
    dout: &[F],
    cache: &LayerNormCache<F>,
    gamma: &[F],
    rows: usize,
    d: usize,
) {
    let n = cst::<F>(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rows {
        let dr = &dout[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for i in 0..d {
            dgamma[i] += dr[i] * xh[i];
            dbeta[i] += dr[i];
            dxhat[i] = dr[i] * gamma[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        let rstd = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] += rstd * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let u = cst::<F>(GELU_C) * (x + cst::<F>(GELU_A) * x * x * x);
    cst::<F>(0.5) * x * (F::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = cst::<F>(GELU_C);
    let a = cst::<F>(GELU_A);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let half = cst::<F>(0.5);
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + cst::<F>(3.0) * a * x * x)
}

/// Causal multi-head attention over packed `qkv` rows `[q | k | v]`.
/// Returns the concatenated head outputs `[rows, d]` and the attention
/// probabilities `[heads, rows, rows]` (upper triangle zero).
pub fn causal_attention<F: Scalar>(qkv: &[F], rows: usize, d: usize, heads: usize) -> (Vec<F>, Vec<F>) {
    let mut out = vec![F::zero(); rows * d];
    let mut probs = vec![F::zero(); heads * rows * rows];
    for h in 0..heads {
        for i in 0..rows {
            let p = &mut probs[(h * rows + i) * rows..(h * rows + i) * rows + rows];
            attend_row(qkv, i, d, heads, h, p, &mut out[i * d..(i + 1) * d]);
        }
    }
    (out, probs)
}

/// Head `h` of row `i`: fills `p[..=i]` with attention probabilities and adds
/// the weighted values into `out` (length `d`).
pub fn attend_row<F: Scalar>(qkv: &[F], i: usize, d: usize, heads: usize, h: usize, p: &mut [F], out: &mut [F]) {
    let dh = d / heads;
    let scale = F::one() / cst::<F>(dh as f64).sqrt();
    let stride = 3 * d;
    let q = &qkv[i * stride + h * dh..i * stride + (h + 1) * dh];
    let mut max = F::neg_infinity();
    for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
        let k = &qkv[j * stride + d + h * dh..j * stride + d + (h + 1) * dh];
        let s = dot(q, k) * scale;
        *pj = s;
        if s > max {
            max = s;
        }
    }
    let mut z = F::zero();
    for pj in p.iter_mut().take(i + 1) {
        *pj = (*pj - max).exp();
        z += *pj;
    }
    let o = &mut out[h * dh..(h + 1) * dh];
    for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
        *pj = *pj / z;
        let v = &qkv[j * stride + 2 * d + h * dh..j * stride + 2 * d + (h + 1) * dh];
        axpy(o, *pj, v);
    }
}

/// Gradient of [`causal_attention`] with respect to `qkv` (overwrites `dqkv`).
pub fn causal_attention_backward<F: Scalar>(
    dqkv: &mut [F],
    dout: &[F],
    qkv: &[F],
    probs: &[F],
    rows: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = F::one() / cst::<F>(dh as f64).sqrt();
    let stride = 3 * d;
    dqkv[..rows * stride].fill(F::zero());
    let mut dp = vec![F::zero(); rows];
    for h in 0..heads {
        for i in 0..rows {
            let p = &probs[(h * rows + i) * rows..(h * rows + i) * rows + rows];
            let dov = &dout[i * d + h * dh..i * d + (h + 1) * dh];
            let mut weighted = F::zero();
            for j in 0..=i {
                let v = &qkv[j * stride + 2 * d + h * dh..j * stride + 2 * d + (h + 1) * dh];
                dp[j] = dot(dov, v);
                weighted += p[j] * dp[j];
                let dv = &mut dqkv[j * stride + 2 * d + h * dh..j * stride + 2 * d + (h + 1) * dh];
                axpy(dv, p[j], dov);
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == F::zero() {
                    continue;
                }
                let (qs, ks) = (i * stride + h * dh, j * stride + d + h * dh);
                for t in 0..dh {
                    let (qv, kv) = (qkv[qs + t], qkv[ks + t]);
                    dqkv[qs + t] += ds * kv;
                    dqkv[ks + t] += ds * qv;
                }
            }
        }
    }
}

/// Softmax in f64 of one logits row.
pub fn softmax_row<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.to_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v.to_f64().unwrap() - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// log Σ exp in f64.
pub fn log_sum_exp<F: Scalar>(logits: &[F]) -> f64 {
    let max = logits
        .iter()
        .map(|v| v.to_f64().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v.to_f64().unwrap() - max).exp()).sum::<f64>().ln()
}
