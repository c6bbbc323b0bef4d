#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use skiplayer::model::{ModelConfig, Variant};
use skiplayer::tensor::Tensor;

/// Row-major `[m, k] @ [k, n]` accumulated in the obvious order.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        ffn_mult: 2,
        n_heads: 2,
        head_dim: 4,
        max_seq: 16,
        variant,
        ..ModelConfig::default()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

fn mm(a: &[f64], b: &Tensor<f64>) -> Vec<f64> {
    let (k, n) = (b.shape()[0], b.shape()[1]);
    naive_matmul(a, b.data(), a.len() / k, k, n)
}

fn ln_rows(x: &[f64], gain: &Tensor<f64>, bias: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let d = gain.len();
    x.chunks(d).flat_map(|r| layer_norm_row(r, gain.data(), bias.data(), eps)).collect()
}

/// Causal multi-head attention over `seq`-long sequences of `[N, d]` rows.
pub fn reference_attention(q: &[f64], k: &[f64], v: &[f64], seq: usize, d: usize, heads: usize) -> Vec<f64> {
    let n = q.len() / d;
    let hd = d / heads;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let start = i / seq * seq;
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let scores: Vec<f64> = (start..=i)
                .map(|j| cols.clone().map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (jj, s) in scores.iter().enumerate() {
                let p = (s - max).exp() / z;
                for c in cols.clone() {
                    out[i * d + c] += p * v[(start + jj) * d + c];
                }
            }
        }
    }
    out
}

/// Dense decoder stack assembled from named parameters. `masks[l][i]` gates
/// layer `l` for row `i` (whole layer, as in the skiplayer variant); `None`
/// executes everything. Returns `[N, V]` logits.
pub fn reference_forward(
    model: &skiplayer::model::Model<f64>,
    tokens: &[u32],
    seq: usize,
    masks: Option<&[Vec<bool>]>,
) -> Vec<f64> {
    let cfg = &model.config;
    let p = |name: &str| model.params.by_name(name).unwrap_or_else(|| panic!("no {name}"));
    let d = cfg.d_model;
    let n = tokens.len();
    let mut x = vec![0.0; n * d];
    for (i, &tok) in tokens.iter().enumerate() {
        for c in 0..d {
            x[i * d + c] = p("embed").get(&[tok as usize, c]) + p("pos").get(&[i % seq, c]);
        }
    }
    for l in 0..cfg.n_layers {
        let w = |s: &str| p(&format!("layers.{l}.{s}"));
        let h = ln_rows(&x, w("ln1.gain"), w("ln1.bias"), cfg.ln_eps);
        let (q, k, v) = (mm(&h, w("wq")), mm(&h, w("wk")), mm(&h, w("wv")));
        let a = mm(&reference_attention(&q, &k, &v, seq, d, cfg.n_heads), w("wo"));
        let x1: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let h2 = ln_rows(&x1, w("ln2.gain"), w("ln2.bias"), cfg.ln_eps);
        let act: Vec<f64> = mm(&h2, w("w_in"))
            .into_iter()
            .map(|v| match cfg.activation {
                skiplayer::model::Activation::Gelu => gelu(v),
                skiplayer::model::Activation::Relu => v.max(0.0),
            })
            .collect();
        let f = mm(&act, w("w_out"));
        let mut next = x.clone();
        for i in 0..n {
            if masks.map_or(true, |m| m[l][i]) {
                for c in 0..d {
                    next[i * d + c] = x1[i * d + c] + f[i * d + c];
                }
            }
        }
        x = next;
    }
    let hf = ln_rows(&x, p("final_ln.gain"), p("final_ln.bias"), cfg.ln_eps);
    mm(&hf, p("head"))
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3)).fold(0.0, f64::max)
}
