//! Training loop, evaluation and checkpointing.

mod adafactor;
mod checkpoint;
mod schedule;

pub use adafactor::{Adafactor, AdafactorConfig, Moment};
pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use schedule::lr_schedule;

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{eval_windows, sample_batch, Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

const NOISE_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    /// Weight of the capacity auxiliary loss.
    pub aux_weight: f64,
    pub optimizer: AdafactorConfig,
    /// Metrics are logged every this many steps (and at the last step).
    pub log_every: u64,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            seq_len: 128,
            peak_lr: 0.01,
            warmup: 200,
            aux_weight: 0.1,
            optimizer: AdafactorConfig::default(),
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.seq_len == 0 {
            return fail("train.batch_size and train.seq_len must be positive".into());
        }
        if self.warmup == 0 {
            return fail("train.warmup must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("train.peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.aux_weight >= 0.0) {
            return fail(format!("train.aux_weight must be >= 0, got {}", self.aux_weight));
        }
        let o = &self.optimizer;
        if !(o.beta2 > 0.0 && o.beta2 < 1.0) || !(o.eps1 > 0.0) || !(o.clip_threshold > 0.0) {
            return fail("optimizer needs beta2 in (0, 1), eps1 > 0 and clip_threshold > 0".into());
        }
        if self.log_every == 0 {
            return fail("train.log_every must be positive".into());
        }
        Ok(())
    }
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: u64,
    pub nll: f64,
    pub aux: f64,
    pub total: f64,
    /// Hard capacity of every routed layer.
    pub capacities: Vec<f64>,
    pub lr: f64,
    pub tokens_per_sec: f64,
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct TrainState<S> {
    pub model: Model<S>,
    pub optimizer: Adafactor<S>,
    pub step: u64,
    /// Router noise and random masks.
    pub noise_rng: ChaCha8Rng,
    /// Batch offsets.
    pub data_rng: ChaCha8Rng,
    pub config: ExperimentConfig,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<S: Scalar> TrainState<S> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = Adafactor::new(config.train.optimizer, &model.params);
        Ok(TrainState {
            model,
            optimizer,
            step: 0,
            noise_rng: stream_rng(config.seed, NOISE_STREAM),
            data_rng: stream_rng(config.seed, DATA_STREAM),
            config,
        })
    }

    pub fn forward_options(&self, training: bool) -> ForwardOptions {
        let t = &self.config.train;
        ForwardOptions {
            training,
            engine: self.config.engine.kind,
            gsize: self.config.gsize(t.batch_size, t.seq_len),
            aux_weight: t.aux_weight,
            soft_gradient: true,
        }
    }

    pub fn next_batch(&mut self, tokens: &[u32]) -> Result<Batch> {
        let t = &self.config.train;
        sample_batch(tokens, t.batch_size, t.seq_len, &mut self.data_rng)
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<TrainMetrics> {
        let start = Instant::now();
        let opts = self.forward_options(true);
        let mut tape = Tape::new();
        let (out, vars) = self.model.forward(&mut tape, batch.view(), &opts, &mut self.noise_rng)?;
        let total = out.total.ok_or_else(|| Error::State("training batch has no targets".into()))?;
        let nll = out.nll.expect("targets present");
        tape.backward(total)?;
        let lr = lr_schedule(self.step + 1, self.config.train.warmup, self.config.train.peak_lr);
        let grads: Vec<Option<&Tensor<S>>> = vars.iter().map(|&v| tape.grad(v)).collect();
        self.optimizer.update(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        Ok(TrainMetrics {
            step: self.step,
            nll: tape.value(nll).item().as_f64(),
            aux: tape.value(out.aux).item().as_f64(),
            total: tape.value(total).item().as_f64(),
            capacities: out.hard_capacities(),
            lr,
            tokens_per_sec: (batch.batch * batch.seq) as f64 / secs,
        })
    }
}

/// Validation score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Token-weighted mean negative log-likelihood, in nats.
    pub nll: f64,
    pub perplexity: f64,
    pub tokens: usize,
    /// Mean hard capacity per routed layer.
    pub capacities: Vec<f64>,
}

/// Scores `tokens` in non-overlapping windows with inference routing.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    tokens: &[u32],
    seq: usize,
    max_windows: usize,
    per_batch: usize,
    opts: &ForwardOptions,
    seed: u64,
) -> Result<EvalReport> {
    let opts = ForwardOptions { training: false, ..*opts };
    let mut rng = stream_rng(seed, EVAL_STREAM);
    let batches = eval_windows(tokens, seq, max_windows, per_batch)?;
    let mut nll_sum = 0.0;
    let mut count = 0usize;
    let mut caps: Vec<f64> = Vec::new();
    for batch in &batches {
        let mut tape = Tape::<S>::new();
        let (out, _) = model.forward(&mut tape, batch.view(), &opts, &mut rng)?;
        let n = batch.targets.iter().filter(|&&t| t != crate::data::PAD_ID).count();
        nll_sum += tape.value(out.nll.expect("targets present")).item().as_f64() * n as f64;
        count += n;
        let hard = out.hard_capacities();
        if caps.is_empty() {
            caps = vec![0.0; hard.len()];
        }
        for (c, h) in caps.iter_mut().zip(hard) {
            *c += h * n as f64;
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    for c in caps.iter_mut() {
        *c /= count as f64;
    }
    let nll = nll_sum / count as f64;
    Ok(EvalReport { nll, perplexity: nll.exp(), tokens: count, capacities: caps })
}

impl<S: Scalar> TrainState<S> {
    pub fn evaluate(&self, corpus: &Corpus) -> Result<EvalReport> {
        let d = &self.config.data;
        evaluate(
            &self.model,
            corpus.validation(),
            self.config.train.seq_len,
            d.eval_windows,
            d.eval_batch,
            &self.forward_options(false),
            self.config.seed,
        )
    }

    /// Trains until `config.train.steps`, logging metrics as JSON lines to
    /// `log` and calling `on_checkpoint` at checkpoint intervals and at the end.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        mut log: Option<&mut dyn Write>,
        mut on_checkpoint: impl FnMut(&TrainState<S>) -> Result<()>,
    ) -> Result<Vec<TrainMetrics>> {
        let mut history = Vec::new();
        let t = self.config.train.clone();
        while self.step < t.steps {
            let batch = self.next_batch(corpus.train())?;
            let m = self.train_step(&batch)?;
            if m.step % t.log_every == 0 || m.step == t.steps {
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", serde_json::to_string(&m)?)?;
                    w.flush()?;
                }
            }
            if t.checkpoint_every > 0 && m.step % t.checkpoint_every == 0 && m.step != t.steps {
                on_checkpoint(self)?;
            }
            history.push(m);
        }
        on_checkpoint(self)?;
        Ok(history)
    }
}
