//! Checkpoint container: an embedded config, the training-state scalars,
//! and an index of named KFT1 blobs for every parameter and optimizer
//! moment. Round-trips are byte-identical.
//!
//! ```text
//! bytes 0..4  magic "KFCP"
//! byte  4     version (1)
//! byte  5     dtype code
//! u32         config length, then the config text
//! state       epoch u32 | step u64 | best_metric f64 | epochs_since_best u32
//!             | train seed u64 | train rng pos u128
//!             | store seed u64 | store rng pos u128
//! u32         entry count
//! entries     kind u8 (0 param, 1 moment-m, 2 moment-v)
//!             | name len u16 | name | offset u64 (from file start)
//! blobs       KFT1 tensors, contiguous, in entry order
//! ```

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::kft;
use crate::optim::{Moments, TrainState};
use crate::scalar::{Dtype, Scalar};
use crate::store::ParameterStore;

pub const MAGIC: &[u8; 4] = b"KFCP";
pub const VERSION: u8 = 1;

const KIND_PARAM: u8 = 0;
const KIND_MOMENT_M: u8 = 1;
const KIND_MOMENT_V: u8 = 2;

/// Deserialized checkpoint payload, still independent of any live model.
pub struct Checkpoint<S: Scalar> {
    pub config: Config,
    pub epoch: u32,
    pub step: u64,
    pub best_metric: f64,
    pub epochs_since_best: u32,
    pub train_rng_seed: u64,
    pub train_rng_pos: u128,
    pub store_seed: u64,
    pub store_rng_pos: u128,
    pub params: Vec<(String, Vec<usize>, Vec<S>)>,
    pub moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Restores optimizer/loop state, including both RNG positions.
    pub fn to_train_state(&self) -> TrainState<S> {
        let mut state = TrainState::new(self.train_rng_seed);
        state.epoch = self.epoch;
        state.step = self.step;
        state.best_metric = self.best_metric;
        state.epochs_since_best = self.epochs_since_best;
        state.rng = ChaCha8Rng::seed_from_u64(self.train_rng_seed);
        state.rng.set_word_pos(self.train_rng_pos);
        for (name, (m, v)) in &self.moments {
            state
                .moments
                .insert(name.clone(), Moments { m: m.clone(), v: v.clone() });
        }
        state
    }

    /// Applies parameter values and the store RNG position to a store whose
    /// parameters were already registered by a model build.
    pub fn apply_to_store(&self, store: &ParameterStore<S>) -> Result<()> {
        store.load_raw(&self.params)?;
        store.set_rng_word_pos(self.store_rng_pos);
        Ok(())
    }
}

pub fn save<S: Scalar>(
    store: &ParameterStore<S>,
    state: &TrainState<S>,
    config: &Config,
    path: &Path,
) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(S::DTYPE.code());
    let config_text = config.to_text();
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&state.epoch.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.best_metric.to_le_bytes());
    out.extend_from_slice(&state.epochs_since_best.to_le_bytes());
    out.extend_from_slice(&state.rng_seed.to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&store.seed().to_le_bytes());
    out.extend_from_slice(&store.rng_word_pos().to_le_bytes());

    // Entry list: every parameter, then the moments that exist for it.
    struct Entry {
        kind: u8,
        name: String,
        dims: Vec<usize>,
        blob: Vec<u8>,
    }
    let mut entries: Vec<Entry> = Vec::new();
    let encode = |dims: &[usize], data: &[S]| -> Result<Vec<u8>> {
        let t = crate::tensor::DenseTensor::new(dims.to_vec(), data.to_vec())?;
        let mut buf = Vec::new();
        kft::write_tensor(&mut buf, &t)?;
        Ok(buf)
    };
    for (name, tensor) in store.iter() {
        entries.push(Entry {
            kind: KIND_PARAM,
            name: name.clone(),
            dims: tensor.dims().to_vec(),
            blob: encode(tensor.dims(), &tensor.data())?,
        });
        if let Some(m) = state.moments.get(name) {
            entries.push(Entry {
                kind: KIND_MOMENT_M,
                name: name.clone(),
                dims: tensor.dims().to_vec(),
                blob: encode(tensor.dims(), &m.m)?,
            });
            entries.push(Entry {
                kind: KIND_MOMENT_V,
                name: name.clone(),
                dims: tensor.dims().to_vec(),
                blob: encode(tensor.dims(), &m.v)?,
            });
        }
    }
    let _ = &entries.iter().map(|e| &e.dims).count();

    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut index_size = 0usize;
    for e in &entries {
        index_size += 1 + 2 + e.name.len() + 8;
    }
    let mut offset = out.len() + index_size;
    for e in &entries {
        out.push(e.kind);
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(offset as u64).to_le_bytes());
        offset += e.blob.len();
    }
    for e in &entries {
        out.extend_from_slice(&e.blob);
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncation(format!(
                "checkpoint ends inside {what} (need {n} bytes at {})",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 6 {
        return Err(Error::Truncation("checkpoint shorter than header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Version { found: bytes[4], supported: VERSION });
    }
    Dtype::from_code(bytes[5]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Version { found: version, supported: VERSION });
    }
    let dtype = Dtype::from_code(r.take(1, "dtype")?[0])
        .ok_or_else(|| Error::Format("unknown dtype code".into()))?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint dtype {dtype} does not match requested {}",
            S::DTYPE
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|e| Error::Format(format!("config not utf-8: {e}")))?;
    let config = Config::parse(config_text)?;
    let epoch = r.u32("epoch")?;
    let step = r.u64("step")?;
    let best_metric = r.f64("best metric")?;
    let epochs_since_best = r.u32("patience counter")?;
    let train_rng_seed = r.u64("train rng seed")?;
    let train_rng_pos = r.u128("train rng pos")?;
    let store_seed = r.u64("store seed")?;
    let store_rng_pos = r.u128("store rng pos")?;

    let n_entries = r.u32("entry count")? as usize;
    let mut index: Vec<(u8, String, u64)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let kind = r.take(1, "entry kind")?[0];
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "entry name")?)
            .map_err(|e| Error::Format(format!("entry name not utf-8: {e}")))?
            .to_string();
        let offset = r.u64("entry offset")?;
        index.push((kind, name, offset));
    }

    let mut params = Vec::new();
    let mut moment_m: BTreeMap<String, Vec<S>> = BTreeMap::new();
    let mut moment_v: BTreeMap<String, Vec<S>> = BTreeMap::new();
    let mut expected_pos = r.pos;
    for (kind, name, offset) in index {
        let offset = offset as usize;
        if offset != expected_pos {
            return Err(Error::Format(format!(
                "blob for {name:?} at offset {offset}, expected {expected_pos}"
            )));
        }
        if offset >= bytes.len() {
            return Err(Error::Truncation(format!("blob for {name:?} beyond end of file")));
        }
        let mut cursor = Cursor::new(&bytes[offset..]);
        let tensor = kft::read_tensor_allow_trailing::<S, _>(&mut cursor)?;
        expected_pos = offset + cursor.position() as usize;
        match kind {
            KIND_PARAM => params.push((name, tensor.dims().to_vec(), tensor.to_vec())),
            KIND_MOMENT_M => {
                moment_m.insert(name, tensor.to_vec());
            }
            KIND_MOMENT_V => {
                moment_v.insert(name, tensor.to_vec());
            }
            other => return Err(Error::Format(format!("unknown entry kind {other}"))),
        }
    }
    if expected_pos != bytes.len() {
        return Err(Error::Truncation(format!(
            "checkpoint has {} bytes, blobs end at {expected_pos}",
            bytes.len()
        )));
    }
    let mut moments = BTreeMap::new();
    for (name, m) in moment_m {
        let v = moment_v
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("moment m without v for {name:?}")))?;
        moments.insert(name, (m, v));
    }
    if let Some((name, _)) = moment_v.into_iter().next() {
        return Err(Error::Format(format!("moment v without m for {name:?}")));
    }
    Ok(Checkpoint {
        config,
        epoch,
        step,
        best_metric,
        epochs_since_best,
        train_rng_seed,
        train_rng_pos,
        store_seed,
        store_rng_pos,
        params,
        moments,
    })
}
