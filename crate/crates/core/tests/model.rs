mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skiplayer::data::VOCAB_SIZE;
use skiplayer::model::{
    causal_attention_partial, ffn, highway_layer, param_count, param_specs, skiplayer_apply, wideffn_apply, Activation,
    ForwardOptions, LayerContext, LayerParams, Model, ModelConfig, TokenBatch, Variant,
};
use skiplayer::router::{Mask, RouterDecision, RouterMode};
use skiplayer::sparse::{flops_per_token, Engine};
use skiplayer::tensor::{grad_check, Tape, Tensor, Var};

use common::{max_rel_diff, random_tensor, reference_attention, reference_forward, tiny_config};

fn bound(model: &Model<f64>, tape: &mut Tape<f64>) -> (Vec<Var>, Vec<LayerParams<Var>>) {
    let vars = model.params.bind(tape);
    let layers = model.layout.layers.iter().map(|l| l.map(|id| vars[id])).collect();
    (vars, layers)
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn forward_logits(model: &Model<f64>, tokens: &[u32], b: usize, t: usize, opts: &ForwardOptions, seed: u64) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, _) = model.forward(&mut tape, TokenBatch { tokens, targets: None, batch: b, seq: t }, opts, &mut rng).unwrap();
    tape.value(out.logits).data().to_vec()
}

#[test]
fn ffn_zero_and_identity() {
    let cfg = ModelConfig { ffn_mult: 1, activation: Activation::Relu, ..tiny_config(Variant::Standard) };
    let mut model = Model::<f64>::new(cfg, 0).unwrap();
    let l = model.layout.layers[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[5, 8], 1.0).map(f64::abs);
    for (w_in, w_out, expect_identity) in [(0.0, 0.0, false), (1.0, 1.0, true)] {
        *model.params.get_mut(l.w_in) = Tensor::from_fn(&[8, 8], |i| if i % 9 == 0 { w_in } else { 0.0 });
        *model.params.get_mut(l.w_out) = Tensor::from_fn(&[8, 8], |i| if i % 9 == 0 { w_out } else { 0.0 });
        let mut tape = Tape::new();
        let (_, layers) = bound(&model, &mut tape);
        let xv = tape.constant(x.clone());
        let y = ffn(&mut tape, xv, &layers[0], Activation::Relu).unwrap();
        let want = if expect_identity { x.clone() } else { Tensor::zeros(&[5, 8]) };
        assert_eq!(tape.value(y), &want);
    }
}

#[test]
fn ffn_f32_matches_f64_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[6, 8], 1.0);
    let wi = random_tensor(&mut rng, &[8, 16], 0.5);
    let wo = random_tensor(&mut rng, &[16, 8], 0.5);
    let h = common::naive_matmul(x.data(), wi.data(), 6, 8, 16);
    let a: Vec<f64> = h.iter().map(|&v| common::gelu(v)).collect();
    let want = common::naive_matmul(&a, wo.data(), 6, 16, 8);

    let mut cfg = tiny_config(Variant::Standard);
    cfg.ffn_mult = 2;
    let mut model = Model::<f32>::new(cfg, 0).unwrap();
    let l = model.layout.layers[0];
    *model.params.get_mut(l.w_in) = wi.cast();
    *model.params.get_mut(l.w_out) = wo.cast();
    let mut tape = Tape::<f32>::new();
    let vars = model.params.bind(&mut tape);
    let lv = l.map(|id| vars[id]);
    let xv = tape.constant(x.cast());
    let y = ffn(&mut tape, xv, &lv, Activation::Gelu).unwrap();
    let got: Vec<f64> = tape.value(y).data().iter().map(|&v| v as f64).collect();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0), "{g} vs {w}");
    }
}

fn ctx<'a>(cfg: &'a ModelConfig, b: usize, t: usize, opts: &'a ForwardOptions) -> LayerContext<'a> {
    LayerContext { config: cfg, batch: b, seq: t, opts }
}

#[test]
fn full_mask_attention_matches_reference() {
    let cfg = tiny_config(Variant::Skiplayer);
    let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, t, d) = (2, 5, cfg.d_model);
    let x = random_tensor(&mut rng, &[b * t, d], 1.0);
    for engine in [Engine::Sparse, Engine::MaskedDense] {
        let opts = ForwardOptions { engine, ..ForwardOptions::default() };
        let mut tape = Tape::new();
        let (_, layers) = bound(&model, &mut tape);
        let xv = tape.constant(x.clone());
        let a = causal_attention_partial(&mut tape, xv, &Mask::filled(b, t, true), &layers[0], &ctx(&cfg, b, t, &opts)).unwrap();

        let p = |n: &str| model.params.by_name(n).unwrap();
        let h: Vec<f64> = x
            .data()
            .chunks(d)
            .flat_map(|r| common::layer_norm_row(r, p("layers.0.ln1.gain").data(), p("layers.0.ln1.bias").data(), cfg.ln_eps))
            .collect();
        let proj = |w: &str| common::naive_matmul(&h, p(w).data(), b * t, d, d);
        let mixed = reference_attention(&proj("layers.0.wq"), &proj("layers.0.wk"), &proj("layers.0.wv"), t, d, cfg.n_heads);
        let want = common::naive_matmul(&mixed, p("layers.0.wo").data(), b * t, d, d);
        assert!(max_rel_diff(tape.value(a).data(), &want) < 1e-12);
    }
}

#[test]
fn skipped_rows_are_exact_identity_and_keep_context() {
    let cfg = tiny_config(Variant::Skiplayer);
    let model = Model::<f64>::new(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, t, d) = (1, 6, cfg.d_model);
    let mask = Mask::new(b, t, vec![true, false, true, false, true, true]).unwrap();
    let x = random_tensor(&mut rng, &[t, d], 1.0);
    let run = |x: &Tensor<f64>, engine| {
        let opts = ForwardOptions { engine, gsize: 2, ..ForwardOptions::default() };
        let mut tape = Tape::new();
        let (_, layers) = bound(&model, &mut tape);
        let xv = tape.constant(x.clone());
        let c = ctx(&cfg, b, t, &opts);
        let attn = causal_attention_partial(&mut tape, xv, &mask, &layers[0], &c).unwrap();
        let (out, _) = skiplayer_apply(&mut tape, xv, &layers[0], &RouterDecision::from_mask(mask.clone()), &c).unwrap();
        (tape.value(attn).clone(), tape.value(out).clone())
    };
    for engine in [Engine::Sparse, Engine::MaskedDense] {
        let (attn, out) = run(&x, engine);
        for r in [1, 3] {
            assert_eq!(out.row(r), x.row(r));
            assert!(attn.row(r).iter().all(|&v| v == 0.0));
        }
        let mut perturbed = x.clone();
        for c in 0..d {
            perturbed.data_mut()[d + c] += 0.5;
        }
        let (attn2, _) = run(&perturbed, engine);
        let delta: f64 = (2 * d..3 * d).map(|i| (attn.data()[i] - attn2.data()[i]).abs()).sum();
        assert!(delta > 0.0, "later active token must see the skipped one");
        assert_eq!(attn.row(0), attn2.row(0));
    }
}

#[test]
fn zeroing_skipped_kv_changes_active_output() {
    let cfg = tiny_config(Variant::Skiplayer);
    let mut model = Model::<f64>::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = 4;
    let x = random_tensor(&mut rng, &[t, cfg.d_model], 1.0);
    let mask = Mask::new(1, t, vec![false, true, false, true]).unwrap();
    let run = |model: &Model<f64>| {
        let opts = ForwardOptions::default();
        let mut tape = Tape::new();
        let (_, layers) = bound(model, &mut tape);
        let xv = tape.constant(x.clone());
        let (out, _) =
            skiplayer_apply(&mut tape, xv, &layers[0], &RouterDecision::from_mask(mask.clone()), &ctx(&cfg, 1, t, &opts)).unwrap();
        tape.value(out).clone()
    };
    let before = run(&model);
    // with K = V = 0 the skipped rows contribute zero keys and values
    let l = model.layout.layers[0];
    let zero_kv = |w: &Tensor<f64>| w.map(|_| 0.0);
    *model.params.get_mut(l.wk) = zero_kv(model.params.get(l.wk));
    *model.params.get_mut(l.wv) = zero_kv(model.params.get(l.wv));
    let after = run(&model);
    assert_ne!(before.row(1), after.row(1));
    assert_eq!(before.row(0), after.row(0));
}

#[test]
fn always_on_layer_equals_standard_layer_and_zero_mask_is_identity() {
    let cfg = tiny_config(Variant::Skiplayer);
    let model = Model::<f64>::new(cfg.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, t) = (2, 4);
    let x = random_tensor(&mut rng, &[b * t, cfg.d_model], 1.0);
    let opts = ForwardOptions::default();
    let mut tape = Tape::new();
    let (_, layers) = bound(&model, &mut tape);
    let xv = tape.constant(x.clone());
    let c = ctx(&cfg, b, t, &opts);
    let (on, _) = skiplayer_apply(&mut tape, xv, &layers[0], &RouterDecision::from_mask(Mask::filled(b, t, true)), &c).unwrap();
    let (off, stats) = skiplayer_apply(&mut tape, xv, &layers[0], &RouterDecision::from_mask(Mask::filled(b, t, false)), &c).unwrap();
    assert_eq!(tape.value(off), &x);
    assert_eq!(stats.invocations, 0);

    let mut std_cfg = cfg.clone();
    std_cfg.variant = Variant::Standard;
    let standard = Model::<f64>::new(std_cfg, 6).unwrap();
    let tokens = random_tokens(&mut rng, b * t, cfg.vocab);
    let masks = vec![vec![true; b * t]; 2];
    let want = reference_forward(&standard, &tokens, t, Some(&masks));
    let got = forward_logits(&standard, &tokens, b, t, &ForwardOptions::default(), 0);
    assert!(max_rel_diff(&got, &want) < 1e-10);
    assert!(tape.value(on).is_finite());
}

#[test]
fn standard_stack_matches_reference_assembly() {
    for activation in [Activation::Gelu, Activation::Relu] {
        let cfg = ModelConfig { activation, ..tiny_config(Variant::Standard) };
        let model = Model::<f64>::new(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tokens = random_tokens(&mut rng, 2 * 7, cfg.vocab);
        let want = reference_forward(&model, &tokens, 7, None);
        for engine in [Engine::Sparse, Engine::MaskedDense] {
            let opts = ForwardOptions { engine, ..ForwardOptions::default() };
            let got = forward_logits(&model, &tokens, 2, 7, &opts, 0);
            assert!(max_rel_diff(&got, &want) < 1e-10);
        }
        let m32 = Model::<f32>::from_params(
            cfg.clone(),
            skiplayer::model::ParamStore::from_parts(
                model.params.names().to_vec(),
                model.params.tensors().iter().map(|t| t.cast()).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        let mut tape = Tape::<f32>::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = m32
            .forward(&mut tape, TokenBatch { tokens: &tokens, targets: None, batch: 2, seq: 7 }, &ForwardOptions::default(), &mut r)
            .unwrap();
        let got: Vec<f64> = tape.value(out.logits).data().iter().map(|&v| v as f64).collect();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5 * w.abs().max(1.0), "{g} vs {w}");
        }
    }
}

#[test]
fn routed_forward_matches_reference_with_recorded_masks() {
    let mut cfg = tiny_config(Variant::Skiplayer);
    cfg.n_layers = 3;
    let model = Model::<f64>::new(cfg.clone(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, t) = (3, 6);
    let tokens = random_tokens(&mut rng, b * t, cfg.vocab);
    for training in [true, false] {
        let opts = ForwardOptions { training, gsize: 4, ..ForwardOptions::default() };
        let mut tape = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let (out, _) = model.forward(&mut tape, TokenBatch { tokens: &tokens, targets: None, batch: b, seq: t }, &opts, &mut r).unwrap();
        assert_eq!(out.decisions.len(), cfg.n_layers);
        let masks: Vec<Vec<bool>> = out.decisions.iter().map(|d| d.mask.bits().to_vec()).collect();
        let want = reference_forward(&model, &tokens, t, Some(&masks));
        assert!(max_rel_diff(tape.value(out.logits).data(), &want) < 1e-10);
    }
}

#[test]
fn skip_identity_between_layers() {
    let mut cfg = tiny_config(Variant::Skiplayer);
    cfg.n_layers = 1;
    let model = Model::<f64>::new(cfg.clone(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (b, t) = (2, 8);
    let tokens = random_tokens(&mut rng, b * t, cfg.vocab);
    let mut tape = Tape::new();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (out, vars) = model
        .forward(&mut tape, TokenBatch { tokens: &tokens, targets: None, batch: b, seq: t }, &ForwardOptions::default(), &mut r)
        .unwrap();
    let hidden = tape.value(out.hidden);
    let emb = tape.value(vars[model.layout.embed]);
    let pos = tape.value(vars[model.layout.pos]);
    let mask = &out.decisions[0].mask;
    for i in 0..b * t {
        if !mask.bits()[i] {
            let input: Vec<f64> =
                emb.row(tokens[i] as usize).iter().zip(pos.row(i % t)).map(|(a, p)| a + p).collect();
            assert_eq!(hidden.row(i), input.as_slice());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn logits_are_causal(seed in any::<u64>(), variant_idx in 0usize..5, cut in 1usize..6, engine_sparse in any::<bool>()) {
        let variant = Variant::ALL[variant_idx];
        let mut cfg = tiny_config(variant);
        cfg.router.mode = RouterMode::Top1;
        let model = Model::<f64>::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = 6;
        let tokens = random_tokens(&mut rng, t, cfg.vocab);
        let mut changed = tokens.clone();
        for tok in changed.iter_mut().skip(cut) {
            *tok = (*tok + 1 + rng.random_range(0..50)) % cfg.vocab as u32;
        }
        let engine = if engine_sparse { Engine::Sparse } else { Engine::MaskedDense };
        let opts = ForwardOptions { training: false, engine, ..ForwardOptions::default() };
        // random gating draws per token, so hold its stream fixed
        let a = forward_logits(&model, &tokens, 1, t, &opts, 3);
        let b = forward_logits(&model, &changed, 1, t, &opts, 3);
        let v = cfg.vocab;
        prop_assert_eq!(&a[..cut * v], &b[..cut * v]);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let cfg = tiny_config(Variant::Skiplayer);
    let model = Model::<f64>::new(cfg.clone(), 0).unwrap();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = ForwardOptions::default();
    let bad = [cfg.vocab as u32, 0, 0];
    assert!(model.forward(&mut tape, TokenBatch { tokens: &bad, targets: None, batch: 1, seq: 3 }, &opts, &mut rng).is_err());
    let long = vec![0u32; cfg.max_seq + 1];
    assert!(model
        .forward(&mut tape, TokenBatch { tokens: &long, targets: None, batch: 1, seq: long.len() }, &opts, &mut rng)
        .is_err());
    let mut bad_cfg = cfg.clone();
    bad_cfg.head_dim = 3;
    assert!(Model::<f64>::new(bad_cfg, 0).is_err());
    let mut bad_cfg = cfg;
    bad_cfg.target_p = 0.0;
    assert!(Model::<f64>::new(bad_cfg, 0).is_err());
}

#[test]
fn memorizes_constant_stream_with_tiny_vocab() {
    use skiplayer::train::{Adafactor, AdafactorConfig};
    let cfg = ModelConfig { vocab: 2, ..tiny_config(Variant::Skiplayer) };
    let mut model = Model::<f64>::new(cfg, 1).unwrap();
    let mut opt = Adafactor::new(AdafactorConfig::default(), &model.params);
    let tokens = vec![0u32; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut nll = f64::INFINITY;
    for _ in 0..60 {
        let mut tape = Tape::new();
        let batch = TokenBatch { tokens: &tokens, targets: Some(&tokens), batch: 1, seq: 8 };
        let (out, vars) = model.forward(&mut tape, batch, &ForwardOptions::default(), &mut rng).unwrap();
        nll = tape.value(out.nll.unwrap()).item();
        tape.backward(out.total.unwrap()).unwrap();
        let grads: Vec<_> = vars.iter().map(|&v| tape.grad(v)).collect();
        opt.update(&mut model.params, &grads, 0.05).unwrap();
    }
    assert!(nll < 0.01, "{nll}");
}

#[test]
fn density_one_skiplayer_matches_standard_loss() {
    let mut sk = tiny_config(Variant::Skiplayer);
    sk.router.mode = RouterMode::AlwaysOn;
    sk.target_p = 1.0;
    let st = tiny_config(Variant::Standard);
    let a = Model::<f64>::new(sk, 12).unwrap();
    let b = Model::<f64>::new(st, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tokens = random_tokens(&mut rng, 12, VOCAB_SIZE);
    let targets = random_tokens(&mut rng, 12, VOCAB_SIZE);
    let loss = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let batch = TokenBatch { tokens: &tokens, targets: Some(&targets), batch: 2, seq: 6 };
        let (out, _) = m.forward(&mut tape, batch, &ForwardOptions::default(), &mut r).unwrap();
        tape.value(out.total.unwrap()).item()
    };
    assert_eq!(loss(&a), loss(&b));
}

#[test]
fn wideffn_masks_and_flops() {
    let cfg = tiny_config(Variant::Wideffn);
    assert_eq!(cfg.ffn_hidden(), 2 * cfg.ffn_mult * cfg.d_model);
    let model = Model::<f64>::new(cfg.clone(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (b, t) = (1, 5);
    let x = random_tensor(&mut rng, &[t, cfg.d_model], 1.0);
    let opts = ForwardOptions::default();
    let c = ctx(&cfg, b, t, &opts);
    let mut tape = Tape::new();
    let (_, layers) = bound(&model, &mut tape);
    let xv = tape.constant(x.clone());
    let on = wideffn_apply(&mut tape, xv, &layers[0], &RouterDecision::from_mask(Mask::filled(b, t, true)), &c).unwrap().0;
    let off = wideffn_apply(&mut tape, xv, &layers[0], &RouterDecision::from_mask(Mask::filled(b, t, false)), &c).unwrap().0;
    let attn = causal_attention_partial(&mut tape, xv, &Mask::filled(b, t, true), &layers[0], &c).unwrap();
    let x1 = tape.add(xv, attn).unwrap();
    assert_eq!(tape.value(off), tape.value(x1));
    let n = tape.layer_norm(x1, layers[0].ln2_gain, layers[0].ln2_bias, cfg.ln_eps).unwrap();
    let f = ffn(&mut tape, n, &layers[0], cfg.activation).unwrap();
    let dense = tape.add(f, x1).unwrap();
    assert_eq!(tape.value(on), tape.value(dense));

    let mut big = ModelConfig { n_layers: 4, ..ModelConfig::default() };
    big.variant = Variant::Wideffn;
    let wide = flops_per_token(&big, &[0.5; 4]).unwrap();
    big.variant = Variant::Standard;
    let standard = flops_per_token(&big, &[1.0; 4]).unwrap();
    assert_eq!(wide.layer_compute, standard.layer_compute);
}

#[test]
fn highway_gate_limits() {
    let cfg = tiny_config(Variant::Highway);
    let mut model = Model::<f64>::new(cfg.clone(), 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (b, t) = (1, 4);
    let x = random_tensor(&mut rng, &[t, cfg.d_model], 1.0);
    let opts = ForwardOptions::default();
    let l = model.layout.layers[0];
    let gate_id = l.highway.unwrap();
    let w = model.params.get(gate_id).clone();

    let run = |model: &Model<f64>| {
        let c = ctx(&cfg, b, t, &opts);
        let mut tape = Tape::new();
        let (_, layers) = bound(model, &mut tape);
        let xv = tape.constant(x.clone());
        let out = highway_layer(&mut tape, xv, &layers[0], &c).unwrap();
        let attn = causal_attention_partial(&mut tape, xv, &Mask::filled(b, t, true), &layers[0], &c).unwrap();
        let x1 = tape.add(xv, attn).unwrap();
        let z = tape.layer_norm(x1, layers[0].ln2_gain, layers[0].ln2_bias, cfg.ln_eps).unwrap();
        let f = ffn(&mut tape, z, &layers[0], cfg.activation).unwrap();
        let zg = tape.matmul(z, layers[0].highway.unwrap()).unwrap();
        (tape.value(out).clone(), tape.value(x1).clone(), tape.value(f).clone(), tape.value(zg).clone())
    };

    // a gate weight along the normalized row's own direction gives very negative logits
    *model.params.get_mut(gate_id) = w.map(|v| v * 1e4);
    let (out, x1, _, zg) = run(&model);
    for r in 0..t {
        if zg.data()[r] < -50.0 {
            for c in 0..cfg.d_model {
                assert!((out.row(r)[c] - x1.row(r)[c]).abs() < 1e-12);
            }
        }
    }
    *model.params.get_mut(gate_id) = w.map(|_| 0.0);
    let (out, x1, f, _) = run(&model);
    for i in 0..out.len() {
        assert!((out.data()[i] - 0.5 * (f.data()[i] + x1.data()[i])).abs() < 1e-14);
    }

    model.params.get_mut(gate_id).clone_from(&w);
    let err = grad_check(
        |tape, wt| {
            let vars = model.params.bind(tape);
            let mut lv = l.map(|id| vars[id]);
            lv.highway = Some(wt);
            let xv = tape.constant(x.clone());
            let out = highway_layer(tape, xv, &lv, &ctx(&cfg, b, t, &opts))?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum(sq))
        },
        &w.map(|v| v * 20.0),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn param_count_ledger() {
    let base = ModelConfig { d_model: 64, n_heads: 2, head_dim: 32, n_layers: 2, ffn_mult: 8, vocab: 256, max_seq: 128, ..ModelConfig::default() };
    let std = ModelConfig { variant: Variant::Standard, ..base.clone() };
    let (d, h, v, t) = (64usize, 512usize, 256usize, 128usize);
    let per_layer = 4 * d * d + 2 * d * h + 4 * d;
    let ledger = v * d + t * d + 2 * per_layer + 2 * d + d * v;
    assert_eq!(param_count(&std), ledger);
    let listed: usize = param_specs(&std).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
    assert_eq!(listed, ledger);
    assert_eq!(param_count(&base) - param_count(&std), 2 * d * 2);

    let with = |l: usize, cfg: &ModelConfig| param_count(&ModelConfig { n_layers: l, ..cfg.clone() });
    assert_eq!(with(12, &std) - with(6, &std), 6 * per_layer);
    assert_eq!(with(12, &base) - with(12, &std), 12 * d * 2);
    let hw = ModelConfig { variant: Variant::Highway, ..base.clone() };
    assert_eq!(param_count(&hw) - param_count(&std), 2 * d);
    let model = Model::<f32>::new(base.clone(), 0).unwrap();
    assert_eq!(model.param_count(), param_count(&base));
}
