use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Index into a [`ParamStore`].
pub type ParamId = usize;

/// Per-layer parameter handles. `H` is a [`ParamId`] in the layout and a
/// [`Var`] once bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams<H> {
    pub wq: H,
    pub wk: H,
    pub wv: H,
    pub wo: H,
    /// FFN input weight `[d, h]`.
    pub w_in: H,
    /// FFN output weight `[h, d]`.
    pub w_out: H,
    pub ln1_gain: H,
    pub ln1_bias: H,
    pub ln2_gain: H,
    pub ln2_bias: H,
    /// Router weight `[d, 2]`.
    pub router: Option<H>,
    /// Highway gate weight `[d, 1]`.
    pub highway: Option<H>,
}

impl<H: Copy> LayerParams<H> {
    pub fn map<T>(&self, f: impl Fn(H) -> T) -> LayerParams<T> {
        LayerParams {
            wq: f(self.wq),
            wk: f(self.wk),
            wv: f(self.wv),
            wo: f(self.wo),
            w_in: f(self.w_in),
            w_out: f(self.w_out),
            ln1_gain: f(self.ln1_gain),
            ln1_bias: f(self.ln1_bias),
            ln2_gain: f(self.ln2_gain),
            ln2_bias: f(self.ln2_bias),
            router: self.router.map(&f),
            highway: self.highway.map(&f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerParams<ParamId>>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub head: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal { scaled: bool },
    Ones,
    Zeros,
}

/// Named parameter shapes in storage order.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, h, v) = (config.d_model, config.ffn_hidden(), config.vocab);
    let normal = Init::Normal { scaled: false };
    let scaled = Init::Normal { scaled: true };
    let mut specs = vec![
        ("embed".to_string(), vec![v, d], normal),
        ("pos".to_string(), vec![config.max_seq, d], normal),
    ];
    for l in 0..config.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        specs.push((p("wq"), vec![d, d], normal));
        specs.push((p("wk"), vec![d, d], normal));
        specs.push((p("wv"), vec![d, d], normal));
        specs.push((p("wo"), vec![d, d], scaled));
        specs.push((p("w_in"), vec![d, h], normal));
        specs.push((p("w_out"), vec![h, d], scaled));
        specs.push((p("ln1.gain"), vec![d], Init::Ones));
        specs.push((p("ln1.bias"), vec![d], Init::Zeros));
        specs.push((p("ln2.gain"), vec![d], Init::Ones));
        specs.push((p("ln2.bias"), vec![d], Init::Zeros));
        if config.variant.has_router_weight() {
            specs.push((p("router"), vec![d, 2], normal));
        }
        if config.variant == Variant::Highway {
            specs.push((p("highway"), vec![d, 1], normal));
        }
    }
    specs.push(("final_ln.gain".to_string(), vec![d], Init::Ones));
    specs.push(("final_ln.bias".to_string(), vec![d], Init::Zeros));
    specs.push(("head".to_string(), vec![d, v], normal));
    specs
}

/// Exact number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    param_specs(config).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

pub fn layout(config: &ModelConfig) -> ModelLayout {
    let specs = param_specs(config);
    let id = |name: &str| specs.iter().position(|(n, _, _)| n == name);
    let req = |name: String| id(&name).unwrap_or_else(|| panic!("missing parameter {name}"));
    let layers = (0..config.n_layers)
        .map(|l| {
            let p = |n: &str| format!("layers.{l}.{n}");
            LayerParams {
                wq: req(p("wq")),
                wk: req(p("wk")),
                wv: req(p("wv")),
                wo: req(p("wo")),
                w_in: req(p("w_in")),
                w_out: req(p("w_out")),
                ln1_gain: req(p("ln1.gain")),
                ln1_bias: req(p("ln1.bias")),
                ln2_gain: req(p("ln2.gain")),
                ln2_bias: req(p("ln2.bias")),
                router: id(&p("router")),
                highway: id(&p("highway")),
            }
        })
        .collect();
    ModelLayout {
        embed: req("embed".into()),
        pos: req("pos".into()),
        layers,
        final_gain: req("final_ln.gain".into()),
        final_bias: req("final_ln.bias".into()),
        head: req("head".into()),
    }
}

/// Stable 64-bit FNV-1a, used to give every named tensor its own init stream.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    /// Initializes every tensor from a stream keyed by `(seed, name)`, so adding
    /// or removing a tensor never changes the values of the others.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in param_specs(config) {
            let t = match init {
                Init::Ones => Tensor::ones(&shape),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Normal { scaled } => {
                    let std = if scaled { config.init_std * depth_scale } else { config.init_std };
                    let dist = Normal::new(0.0, std).expect("positive std");
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
                    Tensor::from_fn(&shape, |_| S::of(dist.sample(&mut rng)))
                }
            };
            names.push(name);
            tensors.push(t);
        }
        ParamStore { names, tensors }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<S>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::State("name/tensor count mismatch".into()));
        }
        Ok(ParamStore { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Checks names and shapes against `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let specs = param_specs(config);
        if specs.len() != self.len() {
            return Err(Error::State(format!("expected {} tensors, found {}", specs.len(), self.len())));
        }
        for ((name, shape, _), (n, t)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::State(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}
