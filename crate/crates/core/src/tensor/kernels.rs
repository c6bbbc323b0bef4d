//! Plain-slice numeric kernels shared by the tape and the decoder.
//!
//! Every output row of [`matmul`] is accumulated left-to-right over the inner
//! axis starting from zero, independent of how many rows are in the call. The
//! sparse executor relies on that to match the masked-dense path bit for bit.

use crate::scalar::Scalar;

const MR: usize = 8;
const NR: usize = 16;

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_into(a, b, &mut c, m, k, n);
    c
}

/// `c = a @ b` for row-major `a: [m, k]`, `b: [k, n]`; `c` is overwritten.
pub fn matmul_into<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut i0 = 0;
    while i0 + MR <= m {
        let mut j0 = 0;
        while j0 + NR <= n {
            tile(a, b, c, i0, j0, k, n);
            j0 += NR;
        }
        if j0 < n {
            edge(a, b, c, i0..i0 + MR, j0..n, k, n);
        }
        i0 += MR;
    }
    if i0 < m {
        edge(a, b, c, i0..m, 0..n, k, n);
    }
}

#[inline(always)]
fn tile<S: Scalar>(a: &[S], b: &[S], c: &mut [S], i0: usize, j0: usize, k: usize, n: usize) {
    let mut acc = [[S::zero(); NR]; MR];
    let a_rows: [&[S]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
    for p in 0..k {
        let brow: &[S; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
        for r in 0..MR {
            let av = a_rows[r][p];
            let acc_r = &mut acc[r];
            for j in 0..NR {
                acc_r[j] = acc_r[j] + av * brow[j];
            }
        }
    }
    for r in 0..MR {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(&acc[r]);
    }
}

fn edge<S: Scalar>(
    a: &[S],
    b: &[S],
    c: &mut [S],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    let width = cols.end - cols.start;
    let mut acc = vec![S::zero(); width];
    for i in rows {
        acc.iter_mut().for_each(|v| *v = S::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n + cols.start..p * n + cols.end];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s = *s + av * bv;
            }
        }
        c[i * n + cols.start..i * n + cols.end].copy_from_slice(&acc);
    }
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Normalizes each row of `x` in place into `xhat`; returns per-row `1/sqrt(var + eps)`.
pub fn layer_norm_rows<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    eps: S,
    y: &mut [S],
    xhat: &mut [S],
) -> Vec<S> {
    let d = gain.len();
    let rows = x.len() / d;
    let dn = S::of(d as f64);
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<S>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let is = S::one() / (var + eps).sqrt();
        for j in 0..d {
            let h = (xr[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
        inv.push(is);
    }
    inv
}

pub fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S], eps: S) -> Vec<S> {
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    layer_norm_rows(x, gain, bias, eps, &mut y, &mut xhat);
    y
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    half * x * (S::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Max-subtracted softmax of one row, written into `out`.
pub fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Log of the softmax normalizer of one row.
pub fn log_sum_exp<S: Scalar>(x: &[S]) -> S {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Multi-head attention of a single query row over `keys`/`values`
/// (each `len x d`, row-major). Writes head-major probabilities
/// (`n_heads x len`) into `probs` and the attended row into `out`.
pub fn attend<S: Scalar>(
    q: &[S],
    keys: &[S],
    values: &[S],
    n_heads: usize,
    probs: &mut [S],
    out: &mut [S],
) {
    let d = q.len();
    let hd = d / n_heads;
    let len = keys.len() / d;
    debug_assert_eq!(probs.len(), n_heads * len);
    let scale = S::one() / S::of(hd as f64).sqrt();
    for h in 0..n_heads {
        let qh = &q[h * hd..(h + 1) * hd];
        let ph = &mut probs[h * len..(h + 1) * len];
        for (j, p) in ph.iter_mut().enumerate() {
            let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
            let mut s = S::zero();
            for c in 0..hd {
                s = s + qh[c] * kh[c];
            }
            *p = s * scale;
        }
        let max = ph.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for p in ph.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in ph.iter_mut() {
            *p = *p / sum;
        }
        let oh = &mut out[h * hd..(h + 1) * hd];
        oh.iter_mut().for_each(|o| *o = S::zero());
        for (j, &p) in ph.iter().enumerate() {
            let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
            for c in 0..hd {
                oh[c] = oh[c] + p * vh[c];
            }
        }
    }
}
