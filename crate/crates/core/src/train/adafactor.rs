//! Adafactor without momentum: factored second moments for matrices, a full
//! second moment for vectors, update clipping by RMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdafactorConfig {
    /// Second-moment decay.
    pub beta2: f64,
    /// Added to squared gradients.
    pub eps1: f64,
    /// Updates are scaled down when their RMS exceeds this.
    pub clip_threshold: f64,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        AdafactorConfig { beta2: 0.99, eps1: 1e-30, clip_threshold: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Moment<S> {
    /// Row sums `[r]` and column sums `[c]` of the squared-gradient EMA.
    Factored { rows: Vec<S>, cols: Vec<S> },
    Full(Vec<S>),
}

impl<S: Scalar> Moment<S> {
    pub fn for_shape(shape: &[usize]) -> Self {
        if shape.len() == 2 {
            Moment::Factored { rows: vec![S::zero(); shape[0]], cols: vec![S::zero(); shape[1]] }
        } else {
            Moment::Full(vec![S::zero(); shape.iter().product()])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adafactor<S> {
    pub config: AdafactorConfig,
    pub moments: Vec<Moment<S>>,
    /// Number of updates applied.
    pub step: u64,
}

impl<S: Scalar> Adafactor<S> {
    pub fn new(config: AdafactorConfig, params: &ParamStore<S>) -> Self {
        let moments = params.tensors().iter().map(|t| Moment::for_shape(t.shape())).collect();
        Adafactor { config, moments, step: 0 }
    }

    /// Applies one update. `grads[i]` of `None` counts as zero. Nothing is
    /// modified when any gradient is non-finite.
    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &[Option<&Tensor<S>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.moments.len() != params.len() {
            return Err(Error::State("gradient count does not match parameters".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.get(i).shape() {
                    return Err(Error::State(format!("gradient shape mismatch for {}", params.names()[i])));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {} at step {}", params.names()[i], self.step + 1)));
                }
            }
        }
        self.step += 1;
        let beta2 = S::of(self.config.beta2);
        let one_minus = S::of(1.0 - self.config.beta2);
        let eps1 = S::of(self.config.eps1);
        let correction = S::of(1.0 - self.config.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let lr = S::of(lr);
        let clip = S::of(self.config.clip_threshold);

        for (i, moment) in self.moments.iter_mut().enumerate() {
            let param = params.get_mut(i);
            let n = param.len();
            let zeros;
            let g: &[S] = match grads[i] {
                Some(g) => g.data(),
                None => {
                    zeros = vec![S::zero(); n];
                    &zeros
                }
            };
            let mut update = vec![S::zero(); n];
            match moment {
                Moment::Factored { rows, cols } => {
                    let (r, c) = (rows.len(), cols.len());
                    let mut row_sq = vec![S::zero(); r];
                    let mut col_sq = vec![S::zero(); c];
                    for a in 0..r {
                        for b in 0..c {
                            let sq = g[a * c + b] * g[a * c + b] + eps1;
                            row_sq[a] += sq;
                            col_sq[b] += sq;
                        }
                    }
                    for (m, s) in rows.iter_mut().zip(&row_sq) {
                        *m = beta2 * *m + one_minus * *s;
                    }
                    for (m, s) in cols.iter_mut().zip(&col_sq) {
                        *m = beta2 * *m + one_minus * *s;
                    }
                    // v = rows[a] * cols[b] / (total * correction), split per axis
                    let total: S = rows.iter().copied().sum();
                    let col_rs: Vec<S> = cols.iter().map(|&v| S::one() / v.sqrt()).collect();
                    for a in 0..r {
                        let row_rs = S::one() / (rows[a] / (total * correction)).sqrt();
                        let (gr, ur) = (&g[a * c..(a + 1) * c], &mut update[a * c..(a + 1) * c]);
                        for b in 0..c {
                            ur[b] = gr[b] * row_rs * col_rs[b];
                        }
                    }
                }
                Moment::Full(v) => {
                    for j in 0..n {
                        v[j] = beta2 * v[j] + one_minus * (g[j] * g[j] + eps1);
                        update[j] = g[j] / (v[j] / correction).sqrt();
                    }
                }
            }
            let rms = (update.iter().map(|&u| u * u).sum::<S>() / S::of(n as f64)).sqrt();
            let denom = S::one().max(rms / clip);
            for (p, u) in param.data_mut().iter_mut().zip(&update) {
                *p -= lr * *u / denom;
            }
        }
        Ok(())
    }
}
