//! Incremental greedy decoding with per-layer key/value caches.
//!
//! Each step feeds one token per batch element through every layer. Keys and
//! values are appended for every layer whether or not the token executes it,
//! so later tokens always see the full history.

use std::collections::BTreeMap;

use rand::distr::{Bernoulli, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EOT_ID;
use crate::error::{Error, Result};
use crate::model::{Activation, LayerParams, Model, ModelConfig, Variant};
use crate::router::{self, RouterMode};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Keys and values of one layer, one growing buffer per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    d: usize,
}

impl<S: Scalar> LayerCache<S> {
    pub fn new(batch: usize, d: usize) -> Self {
        LayerCache { keys: vec![Vec::new(); batch], values: vec![Vec::new(); batch], d }
    }

    pub fn batch(&self) -> usize {
        self.keys.len()
    }

    /// Cached positions.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.len() / self.d)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self, b: usize) -> &[S] {
        &self.keys[b]
    }

    pub fn values(&self, b: usize) -> &[S] {
        &self.values[b]
    }

    fn append(&mut self, k: &[S], v: &[S]) {
        for b in 0..self.keys.len() {
            self.keys[b].extend_from_slice(&k[b * self.d..(b + 1) * self.d]);
            self.values[b].extend_from_slice(&v[b * self.d..(b + 1) * self.d]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KVCache<S> {
    pub layers: Vec<LayerCache<S>>,
    t_cur: usize,
}

impl<S: Scalar> KVCache<S> {
    pub fn new(n_layers: usize, batch: usize, d: usize) -> Self {
        KVCache { layers: (0..n_layers).map(|_| LayerCache::new(batch, d)).collect(), t_cur: 0 }
    }

    /// Tokens processed so far.
    pub fn t_cur(&self) -> usize {
        self.t_cur
    }
}

/// Borrowed parameter tensors of one layer.
pub type LayerTensors<'a, S> = LayerParams<&'a Tensor<S>>;

fn mm<S: Scalar>(x: &[S], w: &Tensor<S>) -> Vec<S> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    kernels::matmul(x, w.data(), x.len() / k, k, n)
}

fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn ln<S: Scalar>(x: &[S], gain: &Tensor<S>, bias: &Tensor<S>, cfg: &ModelConfig) -> Vec<S> {
    kernels::layer_norm(x, gain.data(), bias.data(), S::of(cfg.ln_eps))
}

fn ffn<S: Scalar>(x: &[S], layer: &LayerTensors<'_, S>, cfg: &ModelConfig) -> Vec<S> {
    let mut h = mm(x, layer.w_in);
    for v in h.iter_mut() {
        *v = match cfg.activation {
            Activation::Gelu => kernels::gelu(*v),
            Activation::Relu => v.max(S::zero()),
        };
    }
    mm(&h, layer.w_out)
}

/// Attention sub-layer for the rows in `rows` against the cache, plus residual.
/// Rows not listed are returned unchanged.
fn attention_rows<S: Scalar>(
    x: &[S],
    hn: &[S],
    rows: &[usize],
    layer: &LayerTensors<'_, S>,
    cache: &LayerCache<S>,
    cfg: &ModelConfig,
) -> Vec<S> {
    let d = cfg.d_model;
    let mut out = x.to_vec();
    if rows.is_empty() {
        return out;
    }
    let hq: Vec<S> = rows.iter().flat_map(|&b| hn[b * d..(b + 1) * d].iter().copied()).collect();
    let q = mm(&hq, layer.wq);
    let len = cache.len();
    let mut probs = vec![S::zero(); cfg.n_heads * len];
    let mut mixed = vec![S::zero(); rows.len() * d];
    for (i, &b) in rows.iter().enumerate() {
        kernels::attend(
            &q[i * d..(i + 1) * d],
            cache.keys(b),
            cache.values(b),
            cfg.n_heads,
            &mut probs,
            &mut mixed[i * d..(i + 1) * d],
        );
    }
    let o = mm(&mixed, layer.wo);
    for (i, &b) in rows.iter().enumerate() {
        for c in 0..d {
            out[b * d + c] = x[b * d + c] + o[i * d + c];
        }
    }
    out
}

/// `FFN(LN(x)) + x` on the listed rows; others unchanged.
fn ffn_rows<S: Scalar>(x: &[S], rows: &[usize], layer: &LayerTensors<'_, S>, cfg: &ModelConfig) -> Vec<S> {
    let d = cfg.d_model;
    let mut out = x.to_vec();
    if rows.is_empty() {
        return out;
    }
    let xs: Vec<S> = rows.iter().flat_map(|&b| x[b * d..(b + 1) * d].iter().copied()).collect();
    let n = ln(&xs, layer.ln2_gain, layer.ln2_bias, cfg);
    let f = ffn(&n, layer, cfg);
    for (i, &b) in rows.iter().enumerate() {
        for c in 0..d {
            out[b * d + c] = f[i * d + c] + xs[i * d + c];
        }
    }
    out
}

/// Inference-time routing of one layer for `[B, d]` inputs.
pub fn route_step<S: Scalar, R: Rng + ?Sized>(
    x: &[S],
    layer: &LayerTensors<'_, S>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let batch = x.len() / cfg.d_model;
    match cfg.variant {
        Variant::Standard | Variant::Highway => return Ok(vec![true; batch]),
        _ => {}
    }
    let mode = cfg.routing_mode();
    match mode {
        RouterMode::AlwaysOn => Ok(vec![true; batch]),
        RouterMode::Random => {
            let dist = Bernoulli::new(cfg.effective_p().clamp(0.0, 1.0))
                .map_err(|e| Error::Config(format!("target probability: {e}")))?;
            Ok((0..batch).map(|_| dist.sample(rng)).collect())
        }
        RouterMode::GumbelSt | RouterMode::Top1 | RouterMode::Sigmoid => {
            let w = layer
                .router
                .ok_or_else(|| Error::Config(format!("router mode {mode:?} needs a weight")))?;
            let logits = mm(x, w);
            let th = S::of(cfg.router.threshold);
            Ok(logits
                .chunks(2)
                .map(|l| match mode {
                    RouterMode::Sigmoid => kernels::sigmoid(l[1]) > th,
                    _ => router::argmax2(l[0], l[1]),
                })
                .collect())
        }
    }
}

/// One layer for one decoding step on `x: [B, d]`.
///
/// Keys and values of `x` are appended to `cache` first. `forced` overrides
/// the router. Returns the layer output and the decision bits.
pub fn decode_step_layer<S: Scalar, R: Rng + ?Sized>(
    x: &[S],
    layer: &LayerTensors<'_, S>,
    cache: &mut LayerCache<S>,
    cfg: &ModelConfig,
    forced: Option<&[bool]>,
    rng: &mut R,
) -> Result<(Vec<S>, Vec<bool>)> {
    let d = cfg.d_model;
    if cache.d != d || x.len() != cache.batch() * d {
        return Err(Error::State(format!(
            "cache holds {} rows of width {}, input has {} values for width {d}",
            cache.batch(),
            cache.d,
            x.len()
        )));
    }
    let bits = match forced {
        Some(f) if f.len() == cache.batch() => f.to_vec(),
        Some(f) => return Err(Error::State(format!("{} forced bits for batch {}", f.len(), cache.batch()))),
        None => route_step(x, layer, cfg, rng)?,
    };
    let hn = ln(x, layer.ln1_gain, layer.ln1_bias, cfg);
    cache.append(&mm(&hn, layer.wk), &mm(&hn, layer.wv));
    let active: Vec<usize> = (0..bits.len()).filter(|&b| bits[b]).collect();
    let all: Vec<usize> = (0..bits.len()).collect();
    let out = match cfg.variant {
        Variant::Skiplayer | Variant::Random | Variant::Standard => {
            let x1 = attention_rows(x, &hn, &active, layer, cache, cfg);
            ffn_rows(&x1, &active, layer, cfg)
        }
        Variant::Wideffn => {
            let x1 = attention_rows(x, &hn, &all, layer, cache, cfg);
            ffn_rows(&x1, &active, layer, cfg)
        }
        Variant::Highway => {
            let x1 = attention_rows(x, &hn, &all, layer, cache, cfg);
            let z = ln(&x1, layer.ln2_gain, layer.ln2_bias, cfg);
            let f = ffn(&z, layer, cfg);
            let gw = layer
                .highway
                .ok_or_else(|| Error::Config("highway variant needs a gate weight".into()))?;
            let g = mm(&z, gw);
            let mut out = vec![S::zero(); x.len()];
            for r in 0..bits.len() {
                let t = kernels::sigmoid(g[r]);
                for c in 0..d {
                    let i = r * d + c;
                    out[i] = f[i] * t + x1[i] * (S::one() - t);
                }
            }
            out
        }
    };
    Ok((out, bits))
}

/// Result of one decoding step.
#[derive(Clone, Debug)]
pub struct StepOutput<S> {
    /// `[B, V]`.
    pub logits: Vec<S>,
    /// Hidden state entering the final LayerNorm, `[B, d]`.
    pub hidden: Vec<S>,
    /// `bits[l][b]`: whether batch element `b` executed layer `l`.
    pub bits: Vec<Vec<bool>>,
}

/// A decoding session: frozen model plus its own cache.
pub struct DecodeSession<'m, S> {
    model: &'m Model<S>,
    layers: Vec<LayerTensors<'m, S>>,
    pub cache: KVCache<S>,
}

impl<'m, S: Scalar> DecodeSession<'m, S> {
    pub fn new(model: &'m Model<S>, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Input("decode batch must be positive".into()));
        }
        let p = &model.params;
        let layers = model.layout.layers.iter().map(|l| l.map(|id| p.get(id))).collect();
        let cfg = &model.config;
        Ok(DecodeSession { model, layers, cache: KVCache::new(cfg.n_layers, batch, cfg.d_model) })
    }

    /// Feeds one token per batch element.
    pub fn step<R: Rng + ?Sized>(&mut self, tokens: &[u32], forced: Option<&[Vec<bool>]>, rng: &mut R) -> Result<StepOutput<S>> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let batch = self.cache.layers[0].batch();
        if tokens.len() != batch {
            return Err(Error::Input(format!("expected {batch} tokens, got {}", tokens.len())));
        }
        let pos = self.cache.t_cur;
        if pos >= cfg.max_seq {
            return Err(Error::Input(format!("context is full at max_seq {}", cfg.max_seq)));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= cfg.vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
        }
        let l = &self.model.layout;
        let p = &self.model.params;
        let (emb, pe) = (p.get(l.embed), p.get(l.pos));
        let mut x = Vec::with_capacity(batch * d);
        for &id in tokens {
            x.extend(add(emb.row(id as usize), pe.row(pos)));
        }
        let mut bits = Vec::with_capacity(cfg.n_layers);
        for (i, layer) in self.layers.iter().enumerate() {
            let force = forced.map(|f| f[i].as_slice());
            let (out, b) = decode_step_layer(&x, layer, &mut self.cache.layers[i], cfg, force, rng)?;
            x = out;
            bits.push(b);
        }
        self.cache.t_cur += 1;
        let hf = ln(&x, p.get(l.final_gain), p.get(l.final_bias), cfg);
        let logits = mm(&hf, p.get(l.head));
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decode logits".into()));
        }
        Ok(StepOutput { logits, hidden: x, bits })
    }
}

/// Index of the largest value; the first wins ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One processed token of a B=1 decode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Token fed at this step.
    pub input: u32,
    /// Per-layer execute bits for that token.
    pub bits: Vec<bool>,
    /// Greedy prediction from this step's logits.
    pub output: u32,
    /// Whether `input` was generated rather than taken from the prompt.
    pub generated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub n_layers: usize,
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    pub fn new(n_layers: usize) -> Self {
        DecodeTrace { n_layers, steps: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let trace: DecodeTrace = serde_json::from_str(s)?;
        if let Some(bad) = trace.steps.iter().find(|s| s.bits.len() != trace.n_layers) {
            return Err(Error::Input(format!("trace step has {} bits for {} layers", bad.bits.len(), trace.n_layers)));
        }
        Ok(trace)
    }
}

/// Greedy decoding of a single prompt. The prompt is fed through the same
/// per-step path as generated tokens. Stops after `max_new` generated tokens,
/// on the end-of-text id, or when the context is full.
pub fn greedy_decode<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    prompt: &[u32],
    max_new: usize,
    rng: &mut R,
) -> Result<(Vec<u32>, DecodeTrace)> {
    if prompt.is_empty() {
        return Err(Error::Input("prompt must contain at least one token".into()));
    }
    let cfg = &model.config;
    if prompt.len() > cfg.max_seq {
        return Err(Error::Input(format!("prompt of {} tokens exceeds max_seq {}", prompt.len(), cfg.max_seq)));
    }
    let mut session = DecodeSession::new(model, 1)?;
    let mut trace = DecodeTrace::new(cfg.n_layers);
    let mut generated = Vec::new();
    let mut next = None;
    for (i, &tok) in prompt.iter().enumerate() {
        let out = session.step(&[tok], None, rng)?;
        let pred = argmax(&out.logits) as u32;
        trace.steps.push(TraceStep { input: tok, bits: out.bits.iter().map(|b| b[0]).collect(), output: pred, generated: false });
        if i + 1 == prompt.len() {
            next = Some(pred);
        }
    }
    let mut next = next.expect("prompt is non-empty");
    while generated.len() < max_new {
        generated.push(next);
        if next == EOT_ID || session.cache.t_cur() >= cfg.max_seq || generated.len() == max_new {
            break;
        }
        let out = session.step(&[next], None, rng)?;
        let pred = argmax(&out.logits) as u32;
        trace.steps.push(TraceStep { input: next, bits: out.bits.iter().map(|b| b[0]).collect(), output: pred, generated: true });
        next = pred;
    }
    Ok((generated, trace))
}

/// Feeds `tokens` through a B=1 session and records the trace, without
/// generating anything. Stops at the context limit.
pub fn trace_tokens<S: Scalar, R: Rng + ?Sized>(model: &Model<S>, tokens: &[u32], rng: &mut R) -> Result<DecodeTrace> {
    let cfg = &model.config;
    let mut session = DecodeSession::new(model, 1)?;
    let mut trace = DecodeTrace::new(cfg.n_layers);
    for &tok in tokens.iter().take(cfg.max_seq) {
        let out = session.step(&[tok], None, rng)?;
        let pred = argmax(&out.logits) as u32;
        trace.steps.push(TraceStep { input: tok, bits: out.bits.iter().map(|b| b[0]).collect(), output: pred, generated: false });
    }
    Ok(trace)
}

/// One row of the skip-statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipStat {
    pub token: String,
    pub mean_skipped: f64,
    pub count: usize,
}

/// Mean number of skipped layers per input token, sorted by mean descending
/// then token. Tokens with the same display string are merged.
pub fn skip_stats(trace: &DecodeTrace, detok: impl Fn(u32) -> String) -> Result<Vec<SkipStat>> {
    if trace.is_empty() {
        return Err(Error::Input("trace is empty".into()));
    }
    let mut acc: BTreeMap<String, (u64, usize)> = BTreeMap::new();
    for step in &trace.steps {
        let skipped = step.bits.iter().filter(|&&b| !b).count() as u64;
        let e = acc.entry(detok(step.input)).or_default();
        e.0 += skipped;
        e.1 += 1;
    }
    let mut rows: Vec<SkipStat> = acc
        .into_iter()
        .map(|(token, (sum, count))| SkipStat { token, mean_skipped: sum as f64 / count as f64, count })
        .collect();
    rows.sort_by(|a, b| b.mean_skipped.total_cmp(&a.mean_skipped).then_with(|| a.token.cmp(&b.token)));
    Ok(rows)
}

/// Mean skipped layers over all steps of the trace.
pub fn mean_skipped(trace: &DecodeTrace) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let total: usize = trace.steps.iter().map(|s| s.bits.iter().filter(|&&b| !b).count()).sum();
    total as f64 / trace.len() as f64
}

/// Tab-separated table with a header line.
pub fn format_stats(rows: &[SkipStat]) -> String {
    let mut out = String::from("token\tmean_skipped\tcount\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6}\t{}\n", r.token, r.mean_skipped, r.count));
    }
    out
}

/// FLOPs of one B=1 decoding step with `context` cached positions (this token
/// included) and `bits` the per-layer decisions.
pub fn step_flops(cfg: &ModelConfig, context: usize, bits: &[bool]) -> f64 {
    let d = cfg.d_model as f64;
    let h = cfg.ffn_hidden() as f64;
    let attn = 2.0 * d * d + 2.0 * context as f64 * d;
    let ffn = 2.0 * d * h;
    let mut macs = d * cfg.vocab as f64;
    for &m in bits {
        macs += 2.0 * d * d;
        if cfg.variant.has_router_weight() {
            macs += 2.0 * d;
        }
        macs += match cfg.variant {
            Variant::Wideffn => attn + if m { ffn } else { 0.0 },
            Variant::Highway => attn + ffn + d,
            _ => {
                if m {
                    attn + ffn
                } else {
                    0.0
                }
            }
        };
    }
    2.0 * macs
}
