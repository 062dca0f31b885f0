//! Binary checkpoint files.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` payload
//! length, `u32` CRC32 of the payload, payload. The payload holds the
//! config as TOML text, counters, the generator state, the loss log, named
//! parameter arrays with a dtype tag and their shapes, and the Adam moments.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochLog, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{AdamState, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"AVSURFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

/// Element type of stored parameter arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: CheckpointConfig,
    /// Parameters in registration order.
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
    pub rng: RngState,
    pub epoch: u64,
    pub steps: u64,
    pub best_val_loss: f64,
    pub initial_val_loss: Option<f64>,
    pub log: Vec<EpochLog>,
}

impl ModelCheckpoint {
    /// Copies the stored arrays into `store`, which must hold exactly the
    /// same names and shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{name}`")))?;
            let cur = store.value(id);
            if cur.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}`: checkpoint shape {:?} vs model shape {:?}",
                    value.shape(),
                    cur.shape()
                )));
            }
        }
        for (name, value) in &self.params {
            let id = store.id(name).expect("checked above");
            *store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Builds the stored model architecture and loads its parameters.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.model, self.config.train.seed)?;
        self.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_bytes_with(Precision::F64)
    }

    /// Serializes with the given parameter precision. `F32` rounds the
    /// parameter arrays (not the optimizer state), so such files cannot
    /// resume a run bit-exactly.
    pub fn to_bytes_with(&self, precision: Precision) -> Result<Vec<u8>> {
        let text = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(format!("config encoding: {e}")))?;
        let mut w = Writer::default();
        w.bytes(text.as_bytes());
        w.u64(self.epoch);
        w.u64(self.steps);
        w.f64(self.best_val_loss);
        match self.initial_val_loss {
            Some(v) => {
                w.u8(1);
                w.f64(v);
            }
            None => {
                w.u8(0);
                w.f64(0.0);
            }
        }
        w.raw(&self.rng.seed);
        w.u64(self.rng.stream);
        w.raw(&self.rng.word_pos.to_le_bytes());
        w.u32(self.log.len() as u32);
        for r in &self.log {
            w.u64(r.epoch as u64);
            w.f64(r.train_loss);
            w.f64(r.val_loss);
        }
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.bytes(name.as_bytes());
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            match precision {
                Precision::F64 => {
                    w.u8(DTYPE_F64);
                    t.data().iter().for_each(|&v| w.f64(v));
                }
                Precision::F32 => {
                    w.u8(DTYPE_F32);
                    t.data().iter().for_each(|&v| w.raw(&(v as f32).to_le_bytes()));
                }
            }
        }
        if self.adam.m.len() != self.params.len() || self.adam.v.len() != self.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter list".into()));
        }
        w.u64(self.adam.step);
        for ((m, v), (name, t)) in self.adam.m.iter().zip(&self.adam.v).zip(&self.params) {
            if m.len() != t.len() || v.len() != t.len() {
                return Err(Error::Checkpoint(format!("optimizer moments of `{name}` have the wrong length")));
            }
            m.iter().chain(v).for_each(|&x| w.f64(x));
        }
        let payload = w.0;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint, verifying magic, version, length and CRC before
    /// decoding anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Checkpoint(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes: not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let declared = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let crc = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != declared {
            return Err(Error::Checkpoint(format!(
                "checksum failure: header declares {declared} payload bytes, found {} (truncated or padded file)",
                payload.len()
            )));
        }
        let actual = crc32fast::hash(payload);
        if actual != crc {
            return Err(Error::Checkpoint(format!(
                "checksum failure: stored CRC32 {crc:08x}, computed {actual:08x}"
            )));
        }
        decode_payload(payload)
    }
}

fn decode_payload(payload: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = Reader { buf: payload, pos: 0 };
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let config: CheckpointConfig =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
    let epoch = r.u64()?;
    let steps = r.u64()?;
    let best_val_loss = r.f64()?;
    let has_initial = r.u8()?;
    let initial = r.f64()?;
    let initial_val_loss = match has_initial {
        0 => None,
        1 => Some(initial),
        x => return Err(Error::Checkpoint(format!("bad flag byte {x}"))),
    };
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let n_log = r.u32()? as usize;
    let mut log = Vec::with_capacity(n_log.min(1 << 16));
    for _ in 0..n_log {
        log.push(EpochLog {
            epoch: r.u64()? as usize,
            train_loss: r.f64()?,
            val_loss: r.f64()?,
        });
    }
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params.min(1 << 16));
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` has an overflowing shape")))?;
        let data = match r.u8()? {
            DTYPE_F64 => r.f64s(len)?,
            DTYPE_F32 => r
                .take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            t => return Err(Error::Checkpoint(format!("parameter `{name}` has unknown dtype tag {t}"))),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.push((name, t));
    }
    let step = r.u64()?;
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (_, t) in &params {
        m.push(r.f64s(t.len())?);
        v.push(r.f64s(t.len())?);
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            payload.len() - r.pos
        )));
    }
    Ok(ModelCheckpoint {
        config,
        params,
        adam: AdamState { step, m, v },
        rng: RngState { seed, stream, word_pos },
        epoch,
        steps,
        best_val_loss,
        initial_val_loss,
        log,
    })
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn raw(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.raw(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.raw(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.raw(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.raw(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("payload ends early at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let n8 = n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?;
        Ok(self
            .take(n8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Serializes `ckpt` to `path` via a temporary file and rename, so a crash
/// never leaves a half-written checkpoint behind.
pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    write_checkpoint(path, &ckpt.to_bytes()?)
}

pub fn write_checkpoint(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::from_bytes(&read_checkpoint(path)?).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
