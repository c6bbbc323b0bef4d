//! Decoder-only Transformer whose layers can be skipped per token.

mod config;
pub mod layers;
mod params;

pub use config::{Activation, ModelConfig, Positional, Variant};
pub use layers::{
    causal_attention_partial, ffn, highway_layer, skiplayer_apply, skiplayer_forward, wideffn_apply, wideffn_layer,
    LayerContext,
};
pub use params::{layout, param_count, param_specs, LayerParams, ModelLayout, ParamId, ParamStore};

use rand::Rng;

use crate::error::{Error, Result};
use crate::router::{self, RouterDecision};
use crate::scalar::Scalar;
use crate::sparse::{Engine, ExecStats};
use crate::tensor::{Tape, Tensor, Var};

/// Per-call execution options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Training routing (Gumbel noise) versus deterministic inference routing.
    pub training: bool,
    pub engine: Engine,
    pub gsize: usize,
    /// Weight of the capacity auxiliary loss in the total.
    pub aux_weight: f64,
    /// Let routers receive the straight-through gradient. Off means decisions
    /// are constants, which makes the whole model an ordinary differentiable
    /// function of its parameters.
    pub soft_gradient: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { training: true, engine: Engine::Sparse, gsize: 64, aux_weight: 0.1, soft_gradient: true }
    }
}

impl ForwardOptions {
    pub fn inference() -> Self {
        ForwardOptions { training: false, ..Self::default() }
    }
}

/// Token ids on a `[batch, seq]` grid with optional aligned next-token targets.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch<'a> {
    pub tokens: &'a [u32],
    pub targets: Option<&'a [u32]>,
    pub batch: usize,
    pub seq: usize,
}

pub struct ForwardOutput {
    /// `[B, T, V]`.
    pub logits: Var,
    /// Hidden states entering the final LayerNorm, `[B*T, d]`.
    pub hidden: Var,
    pub decisions: Vec<RouterDecision>,
    pub exec: Vec<ExecStats>,
    pub nll: Option<Var>,
    pub aux: Var,
    pub total: Option<Var>,
}

impl ForwardOutput {
    pub fn hard_capacities(&self) -> Vec<f64> {
        self.decisions.iter().map(|d| d.capacity).collect()
    }
}

/// Architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = layout(&config);
        let params = ParamStore::init(&config, seed);
        Ok(Model { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Model { layout: layout(&config), config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Binds parameters on `tape` and runs [`Model::forward_bound`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        batch: TokenBatch<'_>,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<(ForwardOutput, Vec<Var>)> {
        let vars = self.params.bind(tape);
        let out = self.forward_bound(tape, &vars, batch, opts, rng)?;
        Ok((out, vars))
    }

    /// Full forward pass with parameters already on the tape as `vars`
    /// (indexed like the parameter store).
    pub fn forward_bound<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        batch: TokenBatch<'_>,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (b, t) = (batch.batch, batch.seq);
        if vars.len() != self.params.len() {
            return Err(Error::State("parameter binding does not match the model".into()));
        }
        if b == 0 || t == 0 || batch.tokens.len() != b * t {
            return Err(Error::Input(format!("expected {b}x{t} tokens, got {}", batch.tokens.len())));
        }
        if t > cfg.max_seq {
            return Err(Error::Input(format!("sequence length {t} exceeds max_seq {}", cfg.max_seq)));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&id| id as usize >= cfg.vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
        }
        let l = &self.layout;
        let ids: Vec<Option<usize>> = batch.tokens.iter().map(|&id| Some(id as usize)).collect();
        let positions: Vec<Option<usize>> = (0..b * t).map(|i| Some(i % t)).collect();
        let emb = tape.gather_rows(vars[l.embed], &ids)?;
        let pos = tape.gather_rows(vars[l.pos], &positions)?;
        let mut x = tape.add(emb, pos)?;

        let ctx = LayerContext { config: cfg, batch: b, seq: t, opts };
        let mut decisions = Vec::new();
        let mut exec = Vec::new();
        for layer in &l.layers {
            let lv = layer.map(|id| vars[id]);
            let (out, decision, stats) = match cfg.variant {
                Variant::Highway => (highway_layer(tape, x, &lv, &ctx)?, None, ExecStats::default()),
                Variant::Wideffn => {
                    let (o, d, s) = wideffn_layer(tape, x, &lv, &ctx, rng)?;
                    (o, Some(d), s)
                }
                Variant::Standard => {
                    let d = RouterDecision::from_mask(router::Mask::filled(b, t, true));
                    let (o, s) = skiplayer_apply(tape, x, &lv, &d, &ctx)?;
                    (o, None, s)
                }
                Variant::Skiplayer | Variant::Random => {
                    let (o, d, s) = skiplayer_forward(tape, x, &lv, cfg.routing_mode(), &ctx, rng)?;
                    (o, Some(d), s)
                }
            };
            x = out;
            decisions.extend(decision);
            exec.push(stats);
        }
        let hidden = x;
        let hf = tape.layer_norm(x, vars[l.final_gain], vars[l.final_bias], S::of(cfg.ln_eps))?;
        let logits = tape.matmul(hf, vars[l.head])?;
        let logits = tape.reshape(logits, &[b, t, cfg.vocab])?;
        if !tape.value(logits).is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }

        let caps: Vec<Var> = decisions
            .iter()
            .map(|d| match d.capacity_var {
                Some(v) => v,
                None => tape.constant(Tensor::scalar(S::of(d.capacity))),
            })
            .collect();
        let aux = router::aux_loss(tape, &caps, cfg.effective_p())?;

        let (nll, total) = match batch.targets {
            Some(targets) => {
                if targets.len() != b * t {
                    return Err(Error::Input(format!("expected {} targets, got {}", b * t, targets.len())));
                }
                let pad = crate::data::PAD_ID;
                if let Some(&bad) = targets.iter().find(|&&id| id != pad && id as usize >= cfg.vocab) {
                    return Err(Error::Input(format!("target id {bad} outside vocabulary of {}", cfg.vocab)));
                }
                let tgt: Vec<usize> = targets.iter().map(|&id| id as usize).collect();
                let mask: Vec<bool> = targets.iter().map(|&id| id != pad).collect();
                let nll = tape.cross_entropy_mean(logits, &tgt, &mask)?;
                let total = router::total_loss(tape, nll, aux, opts.aux_weight)?;
                if !tape.value(total).is_finite() {
                    return Err(Error::NonFinite("loss".into()));
                }
                (Some(nll), Some(total))
            }
            None => (None, None),
        };
        Ok(ForwardOutput { logits, hidden, decisions, exec, nll, aux, total })
    }
}
