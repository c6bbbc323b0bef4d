//! Binary per-token routing: gate modes, straight-through combine, capacity,
//! and the capacity auxiliary loss.

use rand::distr::{Bernoulli, Distribution, Open01};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    /// Gumbel-perturbed argmax in training, plain argmax at inference.
    #[default]
    GumbelSt,
    /// Argmax of the un-perturbed scores.
    Top1,
    /// Independent sigmoid of the "execute" score against a threshold.
    Sigmoid,
    /// Bernoulli(P) mask, independent of the input.
    Random,
    /// Every token executes the layer.
    AlwaysOn,
}

impl RouterMode {
    /// Whether the mode reads a learned `d x 2` weight.
    pub fn is_learned(self) -> bool {
        matches!(self, RouterMode::GumbelSt | RouterMode::Top1 | RouterMode::Sigmoid)
    }
}

/// Which quantity carries the gradient of each layer's capacity into the
/// auxiliary loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CapacityEstimator {
    /// Forward value is the hard mask ratio; the gradient is that of the mean
    /// soft probability of executing.
    #[default]
    StraightThrough,
    /// Mean soft probability of executing, forward and backward.
    Soft,
}

/// Non-weight router hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterSettings {
    pub mode: RouterMode,
    /// Gumbel-softmax temperature; must be positive.
    pub temperature: f64,
    /// Sigmoid-mode threshold in (0, 1); a token executes when `p > threshold`.
    pub threshold: f64,
    pub capacity: CapacityEstimator,
}

impl Default for RouterSettings {
    fn default() -> Self {
        RouterSettings {
            mode: RouterMode::GumbelSt,
            temperature: 1.0,
            threshold: 0.5,
            capacity: CapacityEstimator::StraightThrough,
        }
    }
}

impl RouterSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("router temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("router threshold must be in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Binary execute/skip mask over a `[batch, seq]` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    seq: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(batch: usize, seq: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != batch * seq {
            return shape_err("mask", &[batch, seq], &[bits.len()]);
        }
        Ok(Mask { batch, seq, bits })
    }

    pub fn filled(batch: usize, seq: usize, value: bool) -> Self {
        Mask { batch, seq, bits: vec![value; batch * seq] }
    }

    pub fn from_fn(batch: usize, seq: usize, f: impl FnMut(usize) -> bool) -> Self {
        Mask { batch, seq, bits: (0..batch * seq).map(f).collect() }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, b: usize, t: usize) -> bool {
        self.bits[b * self.seq + t]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&m| m).count()
    }

    /// Flat indices of executing tokens in row-major order.
    pub fn active(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Fraction of tokens routed into the layer.
pub fn capacity(mask: &Mask) -> f64 {
    mask.count() as f64 / mask.bits.len() as f64
}

/// Outcome of routing one layer's batch.
#[derive(Clone, Debug)]
pub struct RouterDecision {
    pub mask: Mask,
    /// Soft `[N, 2]` probabilities (skip, execute) on the tape, when the mode
    /// has a differentiable path.
    pub soft: Option<Var>,
    /// Hard capacity of `mask`.
    pub capacity: f64,
    /// Differentiable capacity for the auxiliary loss.
    pub capacity_var: Option<Var>,
}

impl RouterDecision {
    pub fn from_mask(mask: Mask) -> Self {
        let capacity = capacity(&mask);
        RouterDecision { mask, soft: None, capacity, capacity_var: None }
    }

    /// Soft probabilities as plain values, or the hard mask one-hot when
    /// the mode has none.
    pub fn soft_values<S: Scalar>(&self, tape: &Tape<S>) -> Tensor<S> {
        match self.soft {
            Some(g) => tape.value(g).clone(),
            None => hard_one_hot(&self.mask),
        }
    }
}

pub fn hard_one_hot<S: Scalar>(mask: &Mask) -> Tensor<S> {
    let mut out = vec![S::zero(); mask.bits.len() * 2];
    for (r, &m) in mask.bits.iter().enumerate() {
        out[2 * r + usize::from(m)] = S::one();
    }
    Tensor::from_parts(vec![mask.bits.len(), 2], out)
}

/// One standard Gumbel(0, 1) draw.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = Open01.sample(rng);
    -(-u.ln()).ln()
}

/// Index of the larger score; index 0 (skip) wins ties.
#[inline]
pub fn argmax2<S: Scalar>(skip: S, exec: S) -> bool {
    exec > skip
}

/// Per-layer routing inputs.
pub struct RouteInput<'a> {
    /// Token states `[B*T, d]` (or any shape with `d` last).
    pub x: Var,
    pub batch: usize,
    pub seq: usize,
    /// `W_G: [d, 2]` for learned modes.
    pub weight: Option<Var>,
    pub settings: &'a RouterSettings,
    pub mode: RouterMode,
    /// Target execute probability, used by the random mode.
    pub target: f64,
    pub training: bool,
}

/// Computes the execute/skip decision for every token of a layer.
///
/// Gumbel noise and random masks are drawn from `rng` in row-major token
/// order, so a fixed seed reproduces the mask sequence.
pub fn route<S: Scalar, R: Rng + ?Sized>(tape: &mut Tape<S>, input: RouteInput<'_>, rng: &mut R) -> Result<RouterDecision> {
    input.settings.validate()?;
    let n = input.batch * input.seq;
    if tape.value(input.x).rows() != n {
        return shape_err("route", tape.shape(input.x), &[input.batch, input.seq]);
    }
    let mode = input.mode;
    if !mode.is_learned() {
        let mask = match mode {
            RouterMode::AlwaysOn => Mask::filled(input.batch, input.seq, true),
            _ => {
                let dist = Bernoulli::new(input.target.clamp(0.0, 1.0))
                    .map_err(|e| Error::Config(format!("target probability: {e}")))?;
                Mask::from_fn(input.batch, input.seq, |_| dist.sample(rng))
            }
        };
        return Ok(RouterDecision::from_mask(mask));
    }
    let weight = input
        .weight
        .ok_or_else(|| Error::Config(format!("router mode {mode:?} needs a weight")))?;
    let d = tape.value(input.x).cols();
    if tape.shape(weight) != [d, 2] {
        return shape_err("route", &[d, 2], tape.shape(weight));
    }
    let x2 = if tape.shape(input.x).len() == 2 { input.x } else { tape.reshape(input.x, &[n, d])? };
    let logits = tape.matmul(x2, weight)?;
    let (soft, bits) = match mode {
        RouterMode::GumbelSt if input.training => {
            let noise: Vec<S> = (0..2 * n).map(|_| S::of(sample_gumbel(rng))).collect();
            let noise = tape.constant(Tensor::from_parts(vec![n, 2], noise));
            let perturbed = tape.add(logits, noise)?;
            let perturbed = tape.scale(perturbed, S::of(1.0 / input.settings.temperature));
            let pv = tape.value(perturbed);
            let bits = (0..n).map(|r| argmax2(pv.row(r)[0], pv.row(r)[1])).collect();
            (tape.softmax_lastdim(perturbed), bits)
        }
        RouterMode::GumbelSt | RouterMode::Top1 => {
            let lv = tape.value(logits);
            let bits = (0..n).map(|r| argmax2(lv.row(r)[0], lv.row(r)[1])).collect();
            (tape.softmax_lastdim(logits), bits)
        }
        RouterMode::Sigmoid => {
            let g = tape.sigmoid_pair(logits)?;
            let gv = tape.value(g);
            let th = S::of(input.settings.threshold);
            let bits = (0..n).map(|r| gv.row(r)[1] > th).collect();
            (g, bits)
        }
        RouterMode::Random | RouterMode::AlwaysOn => unreachable!(),
    };
    let mask = Mask::new(input.batch, input.seq, bits)?;
    let hard = capacity(&mask);
    let soft_cap = tape.mean_column(soft, 1)?;
    let capacity_var = match input.settings.capacity {
        CapacityEstimator::Soft => soft_cap,
        CapacityEstimator::StraightThrough => tape.straight_through(Tensor::scalar(S::of(hard)), soft_cap)?,
    };
    Ok(RouterDecision { mask, soft: Some(soft), capacity: hard, capacity_var: Some(capacity_var) })
}

/// Combines a wrapped layer's output with its input under a routing decision.
///
/// Forward: `layer_out` where the mask is set, `x` elsewhere, exactly. With
/// `soft_gradient`, the soft probabilities receive the straight-through
/// gradient; without it the decision is treated as a constant.
pub fn st_combine<S: Scalar>(
    tape: &mut Tape<S>,
    layer_out: Var,
    x: Var,
    decision: &RouterDecision,
    soft_gradient: bool,
) -> Result<Var> {
    let gate = if soft_gradient { decision.soft } else { None };
    tape.st_combine(layer_out, x, gate, decision.mask.bits())
}

/// `sum_i (r_i - target)^2`.
pub fn aux_loss<S: Scalar>(tape: &mut Tape<S>, capacities: &[Var], target: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!("target probability must be in [0, 1], got {target}")));
    }
    let mut total: Option<Var> = None;
    for &r in capacities {
        let dev = tape.add_scalar(r, S::of(-target));
        let sq = tape.mul(dev, dev)?;
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(S::zero())),
    })
}

/// `nll + lambda * aux`.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, nll: Var, aux: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("aux weight must be >= 0, got {lambda}")));
    }
    let weighted = tape.scale(aux, S::of(lambda));
    tape.add(nll, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn settings(mode: RouterMode) -> RouterSettings {
        RouterSettings { mode, ..RouterSettings::default() }
    }

    #[test]
    fn zero_weight_sigmoid_skips_everything() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[6, 3], |i| i as f64 - 2.0));
        let w = tape.param(Tensor::zeros(&[3, 2]));
        let s = settings(RouterMode::Sigmoid);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = route(
            &mut tape,
            RouteInput { x, batch: 2, seq: 3, weight: Some(w), settings: &s, mode: s.mode, target: 0.5, training: true },
            &mut rng,
        )
        .unwrap();
        assert_eq!(dec.mask.count(), 0);
        let g = tape.value(dec.soft.unwrap());
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn capacity_cases() {
        assert_eq!(capacity(&Mask::filled(2, 4, true)), 1.0);
        assert_eq!(capacity(&Mask::filled(2, 4, false)), 0.0);
        assert_eq!(capacity(&Mask::from_fn(2, 4, |i| i % 2 == 0)), 0.5);
    }

    #[test]
    fn aux_loss_values() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::scalar(0.75));
        let a = aux_loss(&mut tape, &[r], 0.5).unwrap();
        assert_eq!(tape.value(a).item(), 0.0625);
        let r1 = tape.constant(Tensor::scalar(0.3));
        let r2 = tape.constant(Tensor::scalar(0.7));
        let a2 = aux_loss(&mut tape, &[r1, r2], 0.5).unwrap();
        assert!((tape.value(a2).item() - 0.08).abs() < 1e-15);
        let same = tape.constant(Tensor::scalar(0.5));
        let a3 = aux_loss(&mut tape, &[same, same], 0.5).unwrap();
        assert_eq!(tape.value(a3).item(), 0.0);
    }

    #[test]
    fn total_loss_values() {
        let mut tape = Tape::<f64>::new();
        let nll = tape.constant(Tensor::scalar(2.0));
        let aux = tape.constant(Tensor::scalar(0.0625));
        let t = total_loss(&mut tape, nll, aux, 0.1).unwrap();
        assert!((tape.value(t).item() - 2.00625).abs() < 1e-12);
        let t0 = total_loss(&mut tape, nll, aux, 0.0).unwrap();
        assert_eq!(tape.value(t0).item(), 2.0);
        let zero = tape.constant(Tensor::scalar(0.0));
        let t1 = total_loss(&mut tape, nll, zero, 0.1).unwrap();
        assert_eq!(tape.value(t1).item(), 2.0);
        assert!(total_loss(&mut tape, nll, aux, -1.0).is_err());
    }

    #[test]
    fn nonpositive_temperature_is_config_error() {
        let mut s = settings(RouterMode::GumbelSt);
        s.temperature = 0.0;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn argmax_ties_skip() {
        assert!(!argmax2(0.3f64, 0.3));
        assert!(argmax2(0.3f64, 0.30001));
    }
}
