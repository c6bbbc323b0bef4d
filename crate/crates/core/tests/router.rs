mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skiplayer::router::{
    aux_loss, capacity, route, st_combine, total_loss, CapacityEstimator, Mask, RouteInput, RouterDecision, RouterMode,
    RouterSettings,
};
use skiplayer::tensor::{Tape, Tensor};
use skiplayer::Error;

use common::random_tensor;

struct Routed {
    tape: Tape<f64>,
    decision: RouterDecision,
    weight: skiplayer::Var,
    x: skiplayer::Var,
}

fn route_tensors(x: &Tensor<f64>, w: &Tensor<f64>, settings: RouterSettings, training: bool, target: f64, seed: u64) -> Routed {
    let n = x.rows();
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.param(w.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decision = route(
        &mut tape,
        RouteInput { x: xv, batch: 1, seq: n, weight: Some(wv), settings: &settings, mode: settings.mode, target, training },
        &mut rng,
    )
    .unwrap();
    Routed { tape, decision, weight: wv, x: xv }
}

fn settings(mode: RouterMode) -> RouterSettings {
    RouterSettings { mode, ..RouterSettings::default() }
}

/// Weight whose logits are `x . (0, c)` for a leading unit feature.
fn offset_weight(d: usize, diff: f64) -> Tensor<f64> {
    let mut w = vec![0.0; d * 2];
    w[1] = diff;
    Tensor::new(vec![d, 2], w).unwrap()
}

#[test]
fn zero_weight_sigmoid_skips() {
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[16, 4], 1.0);
    let r = route_tensors(&x, &Tensor::zeros(&[4, 2]), settings(RouterMode::Sigmoid), true, 0.5, 0);
    assert!(r.decision.mask.bits().iter().all(|&b| !b));
    let g = r.decision.soft_values(&r.tape);
    assert!(g.data().iter().all(|&v| v == 0.5));
}

#[test]
fn large_margin_gumbel_almost_always_executes() {
    let x = Tensor::from_fn(&[10_000, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
    let r = route_tensors(&x, &offset_weight(2, 20.0), settings(RouterMode::GumbelSt), true, 0.5, 11);
    let frac = capacity(&r.decision.mask);
    assert!(frac > 0.999, "{frac}");
}

#[test]
fn random_mode_concentrates() {
    let s = settings(RouterMode::Random);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[100_000, 1]));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = route(
        &mut tape,
        RouteInput { x, batch: 100, seq: 1000, weight: None, settings: &s, mode: s.mode, target: 0.25, training: true },
        &mut rng,
    )
    .unwrap();
    assert!((d.capacity - 0.25).abs() < 0.01, "{}", d.capacity);
    assert!(d.soft.is_none());
}

#[test]
fn non_positive_temperature_is_config_error() {
    let x = Tensor::zeros(&[2, 2]);
    for tau in [0.0, -1.0] {
        let s = RouterSettings { temperature: tau, ..RouterSettings::default() };
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(Tensor::zeros(&[2, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = route(
            &mut tape,
            RouteInput { x: xv, batch: 1, seq: 2, weight: Some(wv), settings: &s, mode: s.mode, target: 0.5, training: true },
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

#[test]
fn router_weight_shape_is_checked() {
    let x = Tensor::zeros(&[2, 3]);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let wv = tape.constant(Tensor::zeros(&[3, 3]));
    let s = RouterSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(route(
        &mut tape,
        RouteInput { x: xv, batch: 1, seq: 2, weight: Some(wv), settings: &s, mode: s.mode, target: 0.5, training: true },
        &mut rng,
    )
    .is_err());
}

#[test]
fn decision_invariants_hold_for_every_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for mode in [RouterMode::GumbelSt, RouterMode::Top1, RouterMode::Sigmoid, RouterMode::Random, RouterMode::AlwaysOn] {
        for training in [true, false] {
            let x = random_tensor(&mut rng, &[24, 5], 1.0);
            let w = random_tensor(&mut rng, &[5, 2], 2.0);
            let r = route_tensors(&x, &w, settings(mode), training, 0.5, rng.random());
            let m = &r.decision.mask;
            assert_eq!(r.decision.capacity, m.bits().iter().filter(|&&b| b).count() as f64 / 24.0);
            if let Some(g) = r.decision.soft {
                let g = r.tape.value(g);
                assert_eq!(g.shape(), &[24, 2]);
                for row in 0..24 {
                    let s: f64 = g.row(row).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(g.row(row).iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}

#[test]
fn same_seed_same_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[64, 4], 1.0);
    let w = random_tensor(&mut rng, &[4, 2], 1.0);
    for mode in [RouterMode::GumbelSt, RouterMode::Random] {
        let a = route_tensors(&x, &w, settings(mode), true, 0.5, 77);
        let b = route_tensors(&x, &w, settings(mode), true, 0.5, 77);
        let c = route_tensors(&x, &w, settings(mode), true, 0.5, 78);
        assert_eq!(a.decision.mask, b.decision.mask);
        assert_ne!(a.decision.mask, c.decision.mask);
    }
}

proptest! {
    #[test]
    fn inference_mask_invariant_to_positive_weight_scaling(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[20, 6], 1.0);
        let w = random_tensor(&mut rng, &[6, 2], 1.0);
        for mode in [RouterMode::Top1, RouterMode::GumbelSt] {
            let a = route_tensors(&x, &w, settings(mode), false, 0.5, 0);
            let b = route_tensors(&x, &w.map(|v| v * c), settings(mode), false, 0.5, 0);
            prop_assert_eq!(&a.decision.mask, &b.decision.mask);
        }
    }
}

#[test]
fn capacity_examples() {
    assert_eq!(capacity(&Mask::filled(2, 4, true)), 1.0);
    assert_eq!(capacity(&Mask::from_fn(2, 4, |i| i % 2 == 0)), 0.5);
    assert_eq!(capacity(&Mask::filled(2, 4, false)), 0.0);
}

fn aux_of(caps: &[f64], target: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = caps.iter().map(|&c| tape.constant(Tensor::scalar(c))).collect();
    let a = aux_loss(&mut tape, &vars, target).unwrap();
    tape.value(a).item()
}

#[test]
fn aux_and_total_examples() {
    assert_eq!(aux_of(&[0.5, 0.5, 0.5], 0.5), 0.0);
    assert_eq!(aux_of(&[0.75], 0.5), 0.0625);
    assert!((aux_of(&[0.3, 0.7], 0.5) - 0.08).abs() < 1e-15);

    let mut tape = Tape::<f64>::new();
    let nll = tape.constant(Tensor::scalar(2.0));
    let aux = tape.constant(Tensor::scalar(0.0625));
    let zero = tape.constant(Tensor::scalar(0.0));
    let t = total_loss(&mut tape, nll, aux, 0.1).unwrap();
    assert!((tape.value(t).item() - 2.00625).abs() < 1e-15);
    let t0 = total_loss(&mut tape, nll, aux, 0.0).unwrap();
    assert_eq!(tape.value(t0).item(), 2.0);
    let t1 = total_loss(&mut tape, nll, zero, 0.1).unwrap();
    assert_eq!(tape.value(t1).item(), 2.0);
    assert!(total_loss(&mut tape, nll, aux, -0.1).is_err());
}

#[test]
fn st_combine_respects_extreme_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layer = random_tensor(&mut rng, &[6, 3], 1.0);
    let x = random_tensor(&mut rng, &[6, 3], 1.0);
    for (value, want) in [(true, &layer), (false, &x)] {
        let mut tape = Tape::new();
        let lv = tape.constant(layer.clone());
        let xv = tape.constant(x.clone());
        let d = RouterDecision::from_mask(Mask::filled(2, 3, value));
        let out = st_combine(&mut tape, lv, xv, &d, true).unwrap();
        assert_eq!(tape.value(out), want);
    }
    let mut tape = Tape::new();
    let lv = tape.constant(layer);
    let xv = tape.constant(Tensor::zeros(&[5, 3]));
    let d = RouterDecision::from_mask(Mask::filled(2, 3, true));
    assert!(st_combine(&mut tape, lv, xv, &d, true).is_err());
}

/// Forward of st_combine under training Gumbel routing equals the hard select
/// built by hand, for every mode.
#[test]
fn forward_depends_only_on_hard_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [RouterMode::GumbelSt, RouterMode::Top1, RouterMode::Sigmoid, RouterMode::Random, RouterMode::AlwaysOn] {
        for training in [true, false] {
            let x = random_tensor(&mut rng, &[12, 4], 1.0);
            let w = random_tensor(&mut rng, &[4, 2], 3.0);
            let layer = random_tensor(&mut rng, &[12, 4], 1.0);
            let mut r = route_tensors(&x, &w, settings(mode), training, 0.5, rng.random());
            let lv = r.tape.constant(layer.clone());
            let out = st_combine(&mut r.tape, lv, r.x, &r.decision, true).unwrap();
            let hard = Tensor::from_fn(&[12, 4], |i| {
                if r.decision.mask.bits()[i / 4] {
                    layer.data()[i]
                } else {
                    x.data()[i]
                }
            });
            assert_eq!(r.tape.value(out), &hard, "{mode:?} training={training}");
        }
    }
}

#[test]
fn soft_capacity_gradient_reaches_router() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[32, 4], 1.0);
    let w = random_tensor(&mut rng, &[4, 2], 1.0);
    for est in [CapacityEstimator::StraightThrough, CapacityEstimator::Soft] {
        let s = RouterSettings { capacity: est, ..RouterSettings::default() };
        let mut r = route_tensors(&x, &w, s, true, 0.5, 1);
        let cap = r.decision.capacity_var.unwrap();
        let aux = aux_loss(&mut r.tape, &[cap], 0.9).unwrap();
        r.tape.backward(aux).unwrap();
        let g = r.tape.grad(r.weight).unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0), "{est:?}");
        if est == CapacityEstimator::StraightThrough {
            assert_eq!(r.tape.value(cap).item(), r.decision.capacity);
        }
    }
}
