//! Gather/scatter execution of pointwise layers over the executing tokens
//! only, plus analytic FLOPs accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::router::Mask;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// How a routed layer is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Gather executing tokens into fixed-size groups, run, scatter back.
    #[default]
    Sparse,
    /// Run on every token, then select by mask. Reference path.
    MaskedDense,
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Engine::Sparse),
            "masked_dense" => Ok(Engine::MaskedDense),
            other => Err(Error::Config(format!("unknown engine {other:?}"))),
        }
    }
}

/// Partition of the executing tokens into groups of `gsize` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPlan {
    /// Flat (`b * T + t`) indices of executing tokens, row-major.
    pub gathered: Vec<usize>,
    /// Each group has exactly `gsize` slots; `None` marks padding.
    pub groups: Vec<Vec<Option<usize>>>,
    pub gsize: usize,
    pub n_active: usize,
    seq: usize,
}

impl GroupPlan {
    /// `(b, t)` coordinates of the gathered tokens.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.gathered.iter().map(|&i| (i / self.seq, i % self.seq)).collect()
    }

    pub fn padding(&self) -> usize {
        self.groups.len() * self.gsize - self.n_active
    }

    /// All group slots concatenated.
    pub fn slots(&self) -> Vec<Option<usize>> {
        self.groups.iter().flatten().copied().collect()
    }
}

pub fn plan_groups(mask: &Mask, gsize: usize) -> Result<GroupPlan> {
    if gsize == 0 {
        return Err(Error::Config("gsize must be >= 1".into()));
    }
    let gathered = mask.active();
    let groups = gathered
        .chunks(gsize)
        .map(|chunk| {
            let mut g: Vec<Option<usize>> = chunk.iter().map(|&i| Some(i)).collect();
            g.resize(gsize, None);
            g
        })
        .collect();
    Ok(GroupPlan { n_active: gathered.len(), gathered, groups, gsize, seq: mask.seq() })
}

/// Work done by one [`execute_sparse`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub invocations: usize,
    pub rows_processed: usize,
}

/// `out[i] = f(x[i])` on executing rows and `x[i]` elsewhere.
///
/// `x` is `[B*T, d]`. `f` must be pointwise over rows; that is not checked.
/// Under [`Engine::Sparse`] it is invoked once per group on a `[gsize, d]`
/// block whose padding rows are zero.
pub fn execute_sparse<S, F>(
    tape: &mut Tape<S>,
    x: Var,
    mask: &Mask,
    mut f: F,
    gsize: usize,
    engine: Engine,
) -> Result<(Var, ExecStats)>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, Var) -> Result<Var>,
{
    if tape.value(x).rows() != mask.bits().len() || tape.shape(x).len() != 2 {
        return Err(Error::Shape {
            op: "execute_sparse",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![mask.batch(), mask.seq()],
        });
    }
    match engine {
        Engine::MaskedDense => {
            let y = f(tape, x)?;
            let out = tape.select_rows(y, x, mask.bits())?;
            let rows = tape.value(x).rows();
            Ok((out, ExecStats { invocations: 1, rows_processed: rows }))
        }
        Engine::Sparse => {
            let plan = plan_groups(mask, gsize)?;
            if plan.n_active == 0 {
                return Ok((x, ExecStats::default()));
            }
            let mut outs = Vec::with_capacity(plan.groups.len());
            for group in &plan.groups {
                let xg = tape.gather_rows(x, group)?;
                outs.push(f(tape, xg)?);
            }
            let y = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
            let out = tape.scatter_rows(x, y, &plan.slots())?;
            Ok((
                out,
                ExecStats { invocations: plan.groups.len(), rows_processed: plan.groups.len() * plan.gsize },
            ))
        }
    }
}

/// Ratio that maps the reference setting (1024 at `P * B * T = 0.5 * 256 * 1024`).
pub const REFERENCE_GSIZE_SCALE: f64 = 1024.0 / (0.5 * 256.0 * 1024.0);

/// `max(1, round(scale * P * B * T))`.
pub fn choose_gsize(target: f64, batch: usize, seq: usize, scale: f64) -> usize {
    let g = (scale * target * batch as f64 * seq as f64).round();
    if g < 1.0 {
        1
    } else {
        g as usize
    }
}

/// Forward-pass cost per token, in FLOPs (two per multiply-accumulate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub total: f64,
    /// Query/output projections, attention scores and mixing, and FFN for
    /// executing tokens.
    pub layer_compute: f64,
    /// Key/value projections, paid by every token in every layer.
    pub kv_projection: f64,
    /// Router scores, paid by every token in every learned-router layer.
    pub router: f64,
    /// Highway gate scores.
    pub gate: f64,
    /// Output projection to the vocabulary.
    pub head: f64,
    /// Average number of executed layers per token.
    pub eff_layers: f64,
}

/// Analytic cost at per-layer capacities `caps` (ignored for variants that
/// always execute). Attention cost uses the mean causal context
/// `(max_seq + 1) / 2`.
pub fn flops_per_token(config: &ModelConfig, caps: &[f64]) -> Result<FlopsReport> {
    let l = config.n_layers;
    let caps: Vec<f64> = match config.variant {
        Variant::Standard | Variant::Highway => vec![1.0; l],
        _ => {
            if caps.len() != l {
                return Err(Error::Input(format!("expected {l} capacities, got {}", caps.len())));
            }
            caps.to_vec()
        }
    };
    let d = config.d_model as f64;
    let h = config.ffn_hidden() as f64;
    let ctx = (config.max_seq as f64 + 1.0) / 2.0;
    let attn_mac = 2.0 * d * d + 2.0 * ctx * d;
    let ffn_mac = 2.0 * d * h;
    let mut compute = 0.0;
    for &r in &caps {
        compute += match config.variant {
            Variant::Wideffn => attn_mac + r * ffn_mac,
            _ => r * (attn_mac + ffn_mac),
        };
    }
    let kv = l as f64 * 2.0 * d * d;
    let router = if config.variant.has_router_weight() { l as f64 * 2.0 * d } else { 0.0 };
    let gate = if config.variant == Variant::Highway { l as f64 * d } else { 0.0 };
    let head = d * config.vocab as f64;
    let macs = compute + kv + router + gate + head;
    Ok(FlopsReport {
        total: 2.0 * macs,
        layer_compute: 2.0 * compute,
        kv_projection: 2.0 * kv,
        router: 2.0 * router,
        gate: 2.0 * gate,
        head: 2.0 * head,
        eff_layers: caps.iter().sum(),
    })
}

/// [`flops_per_token`] with every layer at the configured target probability.
pub fn flops_at_target(config: &ModelConfig) -> Result<FlopsReport> {
    flops_per_token(config, &vec![config.effective_p(); config.n_layers])
}
