//! Quick oracle suites runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::{argmax, DecodeSession};
use crate::error::Result;
use crate::model::{ForwardOptions, Model, ModelConfig, Variant};
use crate::router::{CapacityEstimator, Mask, RouterMode};
use crate::sparse::{execute_sparse, Engine};
use crate::tensor::{grad_check_norm, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.to_string(), passed, detail }
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        ffn_mult: 2,
        n_heads: 2,
        head_dim: 4,
        max_seq: 8,
        variant,
        ..ModelConfig::default()
    }
}

/// Sparse gather/scatter versus masked-dense on random FFN blocks.
fn sparse_oracle(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (b, t, d) = (rng.random_range(1..=4), rng.random_range(1..=16), rng.random_range(1..=16));
        let density = [0.0, 0.125, 0.5, 1.0][rng.random_range(0..4)];
        let gsize = [1, 4, 32][rng.random_range(0..3)];
        let mask = Mask::from_fn(b, t, |_| rng.random_bool(density));
        let x = Tensor::from_fn(&[b * t, d], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[d, d], |_| rng.random_range(-1.0..1.0));
        let mut outs = Vec::new();
        for engine in [Engine::Sparse, Engine::MaskedDense] {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(w.clone());
            let (y, _) = execute_sparse(&mut tape, xv, &mask, |tp, rows| {
                let h = tp.matmul(rows, wv)?;
                Ok(tp.gelu(h))
            }, gsize, engine)?;
            let loss = tape.sum(y);
            tape.backward(loss)?;
            outs.push((tape.value(y).clone(), tape.grad(wv).cloned().unwrap_or_else(|| Tensor::zeros(&[d, d]))));
        }
        if outs[0].0 != outs[1].0 {
            return Ok(check("sparse executor", false, "forward differs from masked-dense".into()));
        }
        worst = worst.max(outs[0].1.max_abs_diff(&outs[1].1));
    }
    Ok(check("sparse executor", worst < 1e-10, format!("20 cases, max grad diff {worst:.2e}")))
}

/// Finite differences through a tiny model of every variant. Noise is frozen
/// and decisions enter only through the continuous soft capacity.
fn gradients(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = tiny(variant);
        cfg.router.capacity = CapacityEstimator::Soft;
        let model = Model::<f64>::new(cfg.clone(), seed)?;
        let tokens: Vec<u32> = (0..4).map(|i| (i * 37 + 5) as u32).collect();
        let targets: Vec<u32> = (0..4).map(|i| (i * 11 + 3) as u32).collect();
        let opts = ForwardOptions { soft_gradient: false, gsize: 2, ..ForwardOptions::default() };
        let mut worst = 0.0f64;
        for id in 0..model.params.len() {
            let x0 = model.params.get(id).clone();
            let err = grad_check_norm(
                |tape, xv| {
                    let mut vars = model.params.bind(tape);
                    vars[id] = xv;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                    let batch = crate::model::TokenBatch { tokens: &tokens, targets: Some(&targets), batch: 1, seq: 4 };
                    let fo = model.forward_bound(tape, &vars, batch, &opts, &mut rng)?;
                    Ok(fo.total.expect("targets"))
                },
                &x0,
                1e-5,
            )?;
            worst = worst.max(err);
        }
        out.push(check(&format!("gradients ({})", variant.name()), worst < 1e-4, format!("max rel err {worst:.2e}")));
    }
    Ok(out)
}

/// Incremental decoding against the whole-sequence forward.
fn decode_parity(seed: u64) -> Result<Check> {
    let mut cfg = tiny(Variant::Skiplayer);
    cfg.router.mode = RouterMode::Top1;
    let model = Model::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<u32> = (0..cfg.max_seq).map(|_| rng.random_range(0..256)).collect();
    let mut tape = Tape::new();
    let batch = crate::model::TokenBatch { tokens: &tokens, targets: None, batch: 1, seq: tokens.len() };
    let (full, _) = model.forward(&mut tape, batch, &ForwardOptions::inference(), &mut rng)?;
    let logits = tape.value(full.logits);
    let v = cfg.vocab;
    let mut session = DecodeSession::new(&model, 1)?;
    let mut worst = 0.0f64;
    let mut same_argmax = true;
    for (t, &tok) in tokens.iter().enumerate() {
        let step = session.step(&[tok], None, &mut rng)?;
        let row = &logits.data()[t * v..(t + 1) * v];
        for (a, b) in step.logits.iter().zip(row) {
            worst = worst.max((a - b).abs());
        }
        same_argmax &= argmax(&step.logits) == argmax(row);
    }
    Ok(check("decode parity", worst < 1e-10 && same_argmax, format!("max logit diff {worst:.2e}")))
}

pub fn run(seed: u64) -> Result<Vec<Check>> {
    let mut checks = vec![sparse_oracle(seed)?];
    checks.extend(gradients(seed)?);
    checks.push(decode_parity(seed)?);
    Ok(checks)
}
