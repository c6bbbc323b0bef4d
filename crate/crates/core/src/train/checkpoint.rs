//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SKPLCKPT"
//! version  u32
//! digest   32 bytes SHA-256 of the model configuration (JSON)
//! config   u64 length + UTF-8 JSON of the experiment configuration
//! count    u32 number of records
//! record*  name (u32 length + UTF-8), dtype u8, ndim u32, dims u64*ndim, payload
//! ```
//!
//! dtype tags: 1 = f32, 2 = f64, 3 = u64.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Adafactor, Moment, TrainState};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SKPLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const U64_TAG: u8 = 3;

pub fn config_digest(config: &ModelConfig) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&json).into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn header(&mut self, name: &str, tag: u8, shape: &[usize]) {
        self.str(name);
        self.0.push(tag);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
    }

    fn floats<S: Scalar>(&mut self, name: &str, shape: &[usize], data: &[S]) {
        self.header(name, S::DTYPE.tag(), shape);
        for &v in data {
            v.write_le(&mut self.0);
        }
    }

    fn words(&mut self, name: &str, data: &[u64]) {
        self.header(name, U64_TAG, &[data.len()]);
        for &v in data {
            self.u64(v);
        }
    }
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let pos = rng.get_word_pos();
    words.push(rng.get_stream());
    words.push(pos as u64);
    words.push((pos >> 64) as u64);
    words
}

fn rng_from_words(words: &[u64]) -> Result<ChaCha8Rng> {
    if words.len() != 7 {
        return Err(Error::Checkpoint(format!("rng record has {} words, expected 7", words.len())));
    }
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_mut(8).zip(&words[..4]) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[4]);
    rng.set_word_pos(u128::from(words[5]) | (u128::from(words[6]) << 64));
    Ok(rng)
}

/// Serializes `state` to bytes.
pub fn encode<S: Scalar>(state: &TrainState<S>) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.0.extend_from_slice(&config_digest(&state.model.config)?);
    let json = serde_json::to_string(&state.config)?;
    w.u64(json.len() as u64);
    w.0.extend_from_slice(json.as_bytes());

    let params = &state.model.params;
    let count = params.len() + state.optimizer.moments.iter().map(|m| if let Moment::Factored { .. } = m { 2 } else { 1 }).sum::<usize>() + 4;
    w.u32(count as u32);
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.floats(&format!("param/{name}"), t.shape(), t.data());
    }
    for (name, m) in params.names().iter().zip(&state.optimizer.moments) {
        match m {
            Moment::Factored { rows, cols } => {
                w.floats(&format!("moment/{name}/rows"), &[rows.len()], rows);
                w.floats(&format!("moment/{name}/cols"), &[cols.len()], cols);
            }
            Moment::Full(v) => w.floats(&format!("moment/{name}/full"), &[v.len()], v),
        }
    }
    w.words("state/step", &[state.step]);
    w.words("state/optimizer_step", &[state.optimizer.step]);
    w.words("rng/noise", &rng_words(&state.noise_rng));
    w.words("rng/data", &rng_words(&state.data_rng));
    Ok(w.0)
}

pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

enum Payload<S> {
    Floats(Vec<S>),
    Words(Vec<u64>),
}

struct Record<S> {
    name: String,
    shape: Vec<usize>,
    payload: Payload<S>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn record<S: Scalar>(&mut self) -> Result<Record<S>> {
        let name = self.str()?;
        let tag = self.take(1)?[0];
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let payload = if tag == U64_TAG {
            Payload::Words((0..n).map(|_| self.u64()).collect::<Result<_>>()?)
        } else if tag == S::DTYPE.tag() {
            let size = S::DTYPE.size();
            let raw = self.take(n.checked_mul(size).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?)?;
            Payload::Floats(raw.chunks(size).map(S::read_le).collect())
        } else {
            return Err(Error::Checkpoint(format!(
                "{name}: dtype tag {tag} does not match the requested element type {:?}",
                S::DTYPE
            )));
        };
        Ok(Record { name, shape, payload })
    }
}

/// Parses a checkpoint produced by [`encode`].
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<TrainState<S>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let n = r.len()?;
    let config: ExperimentConfig = serde_json::from_slice(r.take(n)?)?;
    config.validate()?;
    if config_digest(&config.model)? != digest {
        return Err(Error::Checkpoint("configuration digest mismatch".into()));
    }
    let count = r.u32()? as usize;
    let mut records = std::collections::HashMap::new();
    for _ in 0..count {
        let rec = r.record::<S>()?;
        if records.insert(rec.name.clone(), rec).is_some() {
            return Err(Error::Checkpoint("duplicate record".into()));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after records".into()));
    }
    let mut take_floats = |name: &str| -> Result<(Vec<usize>, Vec<S>)> {
        match records.remove(name) {
            Some(Record { shape, payload: Payload::Floats(v), .. }) => Ok((shape, v)),
            Some(_) => Err(Error::Checkpoint(format!("{name}: expected floating-point data"))),
            None => Err(Error::Checkpoint(format!("missing record {name}"))),
        }
    };

    let specs = crate::model::param_specs(&config.model);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut moments = Vec::new();
    for (name, shape, _) in &specs {
        let (s, data) = take_floats(&format!("param/{name}"))?;
        if &s != shape {
            return Err(Error::Checkpoint(format!("{name}: shape {s:?}, expected {shape:?}")));
        }
        tensors.push(Tensor::new(s, data)?);
        let moment = if shape.len() == 2 {
            let (_, rows) = take_floats(&format!("moment/{name}/rows"))?;
            let (_, cols) = take_floats(&format!("moment/{name}/cols"))?;
            if rows.len() != shape[0] || cols.len() != shape[1] {
                return Err(Error::Checkpoint(format!("{name}: factored moment has wrong length")));
            }
            Moment::Factored { rows, cols }
        } else {
            let (_, v) = take_floats(&format!("moment/{name}/full"))?;
            if v.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("{name}: moment has wrong length")));
            }
            Moment::Full(v)
        };
        moments.push(moment);
        names.push(name.clone());
    }
    let mut take_words = |name: &str| -> Result<Vec<u64>> {
        match records.remove(name) {
            Some(Record { payload: Payload::Words(v), .. }) => Ok(v),
            Some(_) => Err(Error::Checkpoint(format!("{name}: expected integer data"))),
            None => Err(Error::Checkpoint(format!("missing record {name}"))),
        }
    };
    let single = |v: Vec<u64>, name: &str| -> Result<u64> {
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Checkpoint(format!("{name}: expected one value"))),
        }
    };
    let step = single(take_words("state/step")?, "state/step")?;
    let opt_step = single(take_words("state/optimizer_step")?, "state/optimizer_step")?;
    let noise_rng = rng_from_words(&take_words("rng/noise")?)?;
    let data_rng = rng_from_words(&take_words("rng/data")?)?;
    if let Some(extra) = records.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected record {extra}")));
    }
    let params = ParamStore::from_parts(names, tensors)?;
    let model = Model::from_params(config.model.clone(), params)?;
    let optimizer = Adafactor { config: config.train.optimizer, moments, step: opt_step };
    Ok(TrainState { model, optimizer, step, noise_rng, data_rng, config })
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<TrainState<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
