use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::router::{RouterMode, RouterSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Every layer wrapped in a learned skip router.
    #[default]
    Skiplayer,
    /// Dense Transformer.
    Standard,
    /// Doubled FFN width, router gates the FFN sub-layer only.
    Wideffn,
    /// FFN residual replaced by a sigmoid-gated transform/carry blend.
    Highway,
    /// Skip decisions drawn Bernoulli(P), no learned router.
    Random,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Skiplayer, Variant::Standard, Variant::Wideffn, Variant::Highway, Variant::Random];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Skiplayer => "skiplayer",
            Variant::Standard => "standard",
            Variant::Wideffn => "wideffn",
            Variant::Highway => "highway",
            Variant::Random => "random",
        }
    }

    pub fn has_router_weight(self) -> bool {
        matches!(self, Variant::Skiplayer | Variant::Wideffn)
    }

    /// Whether the variant produces per-layer routing decisions.
    pub fn is_routed(self) -> bool {
        matches!(self, Variant::Skiplayer | Variant::Wideffn | Variant::Random)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skiplayer" => Ok(Variant::Skiplayer),
            "standard" => Ok(Variant::Standard),
            "wideffn" => Ok(Variant::Wideffn),
            "highway" => Ok(Variant::Highway),
            "random" => Ok(Variant::Random),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    LearnedAbsolute,
}

/// Architecture of a decoder-only model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub variant: Variant,
    /// Target execute probability per layer.
    pub target_p: f64,
    pub router: RouterSettings,
    pub activation: Activation,
    pub positional: Positional,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 128,
            ffn_mult: 8,
            n_heads: 4,
            head_dim: 32,
            vocab: crate::data::VOCAB_SIZE,
            max_seq: 128,
            variant: Variant::Skiplayer,
            target_p: 0.5,
            router: RouterSettings::default(),
            activation: Activation::Gelu,
            positional: Positional::LearnedAbsolute,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.ffn_mult == 0 || self.vocab == 0 || self.max_seq == 0 {
            return fail("n_layers, d_model, ffn_mult, vocab and max_seq must be positive".into());
        }
        if self.n_heads == 0 || self.n_heads * self.head_dim != self.d_model {
            return fail(format!(
                "n_heads * head_dim = {} * {} must equal d_model = {}",
                self.n_heads, self.head_dim, self.d_model
            ));
        }
        if !(self.target_p > 0.0 && self.target_p <= 1.0) {
            return fail(format!("target_p must be in (0, 1], got {}", self.target_p));
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        if !(self.init_std > 0.0) {
            return fail(format!("init_std must be > 0, got {}", self.init_std));
        }
        self.router.validate()
    }

    pub fn ffn_hidden(&self) -> usize {
        match self.variant {
            Variant::Wideffn => 2 * self.ffn_mult * self.d_model,
            _ => self.ffn_mult * self.d_model,
        }
    }

    /// Target probability actually in force; dense variants always execute.
    pub fn effective_p(&self) -> f64 {
        match self.variant {
            Variant::Standard | Variant::Highway => 1.0,
            _ => self.target_p,
        }
    }

    /// Routing mode each layer runs under.
    pub fn routing_mode(&self) -> RouterMode {
        match self.variant {
            Variant::Skiplayer | Variant::Wideffn => self.router.mode,
            Variant::Random => RouterMode::Random,
            Variant::Standard | Variant::Highway => RouterMode::AlwaysOn,
        }
    }
}
