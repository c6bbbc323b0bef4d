//! Layer bodies. Every function works on token states flattened to `[B*T, d]`.

use rand::Rng;

use super::config::{Activation, ModelConfig};
use super::params::LayerParams;
use super::ForwardOptions;
use crate::error::Result;
use crate::router::{self, Mask, RouteInput, RouterDecision, RouterMode};
use crate::scalar::Scalar;
use crate::sparse::{execute_sparse, Engine, ExecStats};
use crate::tensor::{Tape, Tensor, Var};

/// Shape and options shared by the layers of one forward pass.
#[derive(Clone, Copy)]
pub struct LayerContext<'a> {
    pub config: &'a ModelConfig,
    pub batch: usize,
    pub seq: usize,
    pub opts: &'a ForwardOptions,
}

/// `act(x W_in) W_out`, no residual.
pub fn ffn<S: Scalar>(tape: &mut Tape<S>, x: Var, layer: &LayerParams<Var>, activation: Activation) -> Result<Var> {
    let h = tape.matmul(x, layer.w_in)?;
    let a = match activation {
        Activation::Gelu => tape.gelu(h),
        Activation::Relu => tape.relu(h),
    };
    tape.matmul(a, layer.w_out)
}

/// `FFN(LN(x)) + x`.
fn ffn_block<S: Scalar>(tape: &mut Tape<S>, x: Var, layer: &LayerParams<Var>, cfg: &ModelConfig) -> Result<Var> {
    let n = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias, S::of(cfg.ln_eps))?;
    let f = ffn(tape, n, layer, cfg.activation)?;
    tape.add(f, x)
}

/// `Attn(LN(x))` for executing tokens, exact zeros for skipped ones.
///
/// Keys and values are projected for every token, so skipped tokens stay
/// visible as context; queries, attention and the output projection run only
/// for executing tokens under [`Engine::Sparse`].
pub fn causal_attention_partial<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    mask: &Mask,
    layer: &LayerParams<Var>,
    ctx: &LayerContext<'_>,
) -> Result<Var> {
    let cfg = ctx.config;
    let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, S::of(cfg.ln_eps))?;
    let k = tape.matmul(h, layer.wk)?;
    let v = tape.matmul(h, layer.wv)?;
    match ctx.opts.engine {
        Engine::Sparse => {
            let active = mask.active();
            let shape = tape.shape(h).to_vec();
            let zeros = tape.constant(Tensor::zeros(&shape));
            if active.is_empty() {
                return Ok(zeros);
            }
            let idx: Vec<Option<usize>> = active.iter().map(|&i| Some(i)).collect();
            let hq = tape.gather_rows(h, &idx)?;
            let q = tape.matmul(hq, layer.wq)?;
            let a = tape.attention(q, k, v, &active, ctx.seq, cfg.n_heads)?;
            let o = tape.matmul(a, layer.wo)?;
            tape.scatter_rows(zeros, o, &idx)
        }
        Engine::MaskedDense => {
            let q = tape.matmul(h, layer.wq)?;
            let all: Vec<usize> = (0..mask.bits().len()).collect();
            let a = tape.attention(q, k, v, &all, ctx.seq, cfg.n_heads)?;
            let o = tape.matmul(a, layer.wo)?;
            tape.zero_rows(o, mask.bits())
        }
    }
}

fn route_layer<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    x: Var,
    layer: &LayerParams<Var>,
    mode: RouterMode,
    ctx: &LayerContext<'_>,
    rng: &mut R,
) -> Result<RouterDecision> {
    router::route(
        tape,
        RouteInput {
            x,
            batch: ctx.batch,
            seq: ctx.seq,
            weight: layer.router,
            settings: &ctx.config.router,
            mode,
            target: ctx.config.effective_p(),
            training: ctx.opts.training,
        },
        rng,
    )
}

/// Routes on the layer input, then applies [`skiplayer_apply`].
pub fn skiplayer_forward<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    x: Var,
    layer: &LayerParams<Var>,
    mode: RouterMode,
    ctx: &LayerContext<'_>,
    rng: &mut R,
) -> Result<(Var, RouterDecision, ExecStats)> {
    let decision = route_layer(tape, x, layer, mode, ctx, rng)?;
    let (out, stats) = skiplayer_apply(tape, x, layer, &decision, ctx)?;
    Ok((out, decision, stats))
}

/// One Transformer layer gated as a whole by `decision`.
///
/// Executing tokens get `x' = Attn(LN(x)) + x`, `out = FFN(LN(x')) + x'`;
/// skipped tokens get `out = x` exactly.
pub fn skiplayer_apply<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    layer: &LayerParams<Var>,
    decision: &RouterDecision,
    ctx: &LayerContext<'_>,
) -> Result<(Var, ExecStats)> {
    let cfg = ctx.config;
    let mask = &decision.mask;
    let attn = causal_attention_partial(tape, x, mask, layer, ctx)?;
    let x1 = tape.add(x, attn)?;
    let (y, stats) = execute_sparse(tape, x1, mask, |t, rows| ffn_block(t, rows, layer, cfg), ctx.opts.gsize, ctx.opts.engine)?;
    let out = router::st_combine(tape, y, x, decision, ctx.opts.soft_gradient)?;
    Ok((out, stats))
}

/// Dense attention, then an FFN sub-layer gated per token.
pub fn wideffn_layer<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    x: Var,
    layer: &LayerParams<Var>,
    ctx: &LayerContext<'_>,
    rng: &mut R,
) -> Result<(Var, RouterDecision, ExecStats)> {
    let decision = route_layer(tape, x, layer, ctx.config.routing_mode(), ctx, rng)?;
    let (out, stats) = wideffn_apply(tape, x, layer, &decision, ctx)?;
    Ok((out, decision, stats))
}

pub fn wideffn_apply<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    layer: &LayerParams<Var>,
    decision: &RouterDecision,
    ctx: &LayerContext<'_>,
) -> Result<(Var, ExecStats)> {
    let cfg = ctx.config;
    let all = Mask::filled(ctx.batch, ctx.seq, true);
    let attn = causal_attention_partial(tape, x, &all, layer, ctx)?;
    let x1 = tape.add(x, attn)?;
    let mask = &decision.mask;
    let (y, stats) = execute_sparse(tape, x1, mask, |t, rows| ffn_block(t, rows, layer, cfg), ctx.opts.gsize, ctx.opts.engine)?;
    let out = router::st_combine(tape, y, x1, decision, ctx.opts.soft_gradient)?;
    Ok((out, stats))
}

/// Dense attention, then `FFN(z) * T + x' * (1 - T)` with `z = LN(x')` and
/// `T = sigmoid(z W_T)`.
pub fn highway_layer<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    layer: &LayerParams<Var>,
    ctx: &LayerContext<'_>,
) -> Result<Var> {
    let cfg = ctx.config;
    let all = Mask::filled(ctx.batch, ctx.seq, true);
    let attn = causal_attention_partial(tape, x, &all, layer, ctx)?;
    let x1 = tape.add(x, attn)?;
    let z = tape.layer_norm(x1, layer.ln2_gain, layer.ln2_bias, S::of(cfg.ln_eps))?;
    let f = ffn(tape, z, layer, cfg.activation)?;
    let gate_w = layer
        .highway
        .ok_or_else(|| crate::error::Error::Config("highway variant needs a gate weight".into()))?;
    let logits = tape.matmul(z, gate_w)?;
    let gate = tape.sigmoid(logits);
    tape.highway(f, x1, gate)
}
