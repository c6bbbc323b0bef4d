use rand::Rng;

use crate::error::{Error, Result};
use crate::model::TokenBatch;

/// Inputs and next-token targets on a `[batch, seq]` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn view(&self) -> TokenBatch<'_> {
        TokenBatch { tokens: &self.inputs, targets: Some(&self.targets), batch: self.batch, seq: self.seq }
    }

    fn push_window(&mut self, window: &[u32]) {
        self.inputs.extend_from_slice(&window[..self.seq]);
        self.targets.extend_from_slice(&window[1..]);
    }
}

/// `batch` windows at uniformly drawn offsets; `targets[b][t] = inputs[b][t + 1]`.
pub fn sample_batch<R: Rng + ?Sized>(tokens: &[u32], batch: usize, seq: usize, rng: &mut R) -> Result<Batch> {
    if batch == 0 || seq == 0 {
        return Err(Error::Config("batch size and sequence length must be positive".into()));
    }
    if tokens.len() <= seq {
        return Err(Error::Input(format!(
            "corpus of {} tokens is too short for sequence length {seq}",
            tokens.len()
        )));
    }
    let offsets = tokens.len() - seq;
    let mut out = Batch { inputs: Vec::with_capacity(batch * seq), targets: Vec::with_capacity(batch * seq), batch, seq };
    for _ in 0..batch {
        let o = rng.random_range(0..offsets);
        out.push_window(&tokens[o..o + seq + 1]);
    }
    Ok(out)
}

/// Consecutive non-overlapping windows, packed `per_batch` at a time.
pub fn eval_windows(tokens: &[u32], seq: usize, max_windows: usize, per_batch: usize) -> Result<Vec<Batch>> {
    if tokens.len() <= seq {
        return Err(Error::Input(format!(
            "corpus of {} tokens is too short for sequence length {seq}",
            tokens.len()
        )));
    }
    let per_batch = per_batch.max(1);
    let count = ((tokens.len() - 1) / seq).min(max_windows.max(1));
    let mut batches = Vec::new();
    let mut w = 0;
    while w < count {
        let n = per_batch.min(count - w);
        let mut b = Batch { inputs: Vec::new(), targets: Vec::new(), batch: n, seq };
        for i in w..w + n {
            b.push_window(&tokens[i * seq..i * seq + seq + 1]);
        }
        batches.push(b);
        w += n;
    }
    Ok(batches)
}
