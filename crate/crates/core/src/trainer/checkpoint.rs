use super::config::ModelConfig;
use super::model::{Learner, ModelState};
use crate::backbone::{hex, BackboneConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CPCK";
pub const FORMAT_VERSION: u32 = 1;

/// Architecture digest: checkpoints only load into a learner with the same
/// model and backbone configuration.
pub fn config_digest(model: &ModelConfig, backbone: &BackboneConfig) -> Result<String> {
    #[derive(Serialize)]
    struct Both<'a> {
        model: &'a ModelConfig,
        backbone: &'a BackboneConfig,
    }
    let bytes = serde_json::to_vec(&Both { model, backbone })?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub precision_bits: u32,
    pub registry_digest: String,
    pub config_digest: String,
    pub backbone_checksum: String,
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub param_names: Vec<String>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn reals<T: Real>(&mut self, xs: &[T]) {
        self.u64(xs.len() as u64);
        for x in xs {
            if T::NAME == "f32" {
                self.0.extend_from_slice(&(x.f64() as f32).to_le_bytes());
            } else {
                self.0.extend_from_slice(&x.f64().to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(width) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!("truncated: {n} items declared at byte {}", self.pos)));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn reals<T: Real>(&mut self, bits: u32) -> Result<Vec<T>> {
        let width = (bits / 8) as usize;
        let n = self.len(width)?;
        let raw = self.take(n * width)?;
        Ok(raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                } else {
                    T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                }
            })
            .collect())
    }
}

fn bits<T: Real>() -> u32 {
    if T::NAME == "f32" {
        32
    } else {
        64
    }
}

/// Serializes `state` with a header identifying the learner it belongs to.
pub fn to_bytes<T: Real>(learner: &Learner<T>, state: &ModelState<T>) -> Result<Vec<u8>> {
    learner.check_state(state)?;
    let backbone = learner.encoder.config().clone();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        precision_bits: bits::<T>(),
        registry_digest: learner.registry.digest(),
        config_digest: config_digest(&learner.config, &backbone)?,
        backbone_checksum: learner.encoder.checksum(),
        model: learner.config.clone(),
        backbone,
        param_names: learner.layout().names().to_vec(),
    };
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes(&serde_json::to_vec(&header)?);
    w.bytes(&serde_json::to_vec(&learner.registry)?);
    w.u64(state.tasks_done as u64);
    w.u64(state.adam_step);
    w.bytes(&state.seen.iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
    w.u64(state.params.len() as u64);
    for ((p, m), v) in state.params.iter().zip(&state.adam_m).zip(&state.adam_v) {
        w.u64(p.rank() as u64);
        for &d in p.shape() {
            w.u64(d as u64);
        }
        w.reals(p.data());
        w.reals(m);
        w.reals(v);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    Ok(w.0)
}

/// Reads only the header, e.g. to rebuild a matching learner.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    Ok(serde_json::from_slice(r.bytes()?)?)
}

/// Restores a state saved by [`to_bytes`], refusing files written for a
/// different registry, architecture, backbone or precision.
pub fn from_bytes<T: Real>(learner: &Learner<T>, bytes: &[u8]) -> Result<ModelState<T>> {
    if bytes.len() < 4 + 32 {
        return Err(Error::Checkpoint(format!("file of {} bytes is truncated", bytes.len())));
    }
    let header = read_header(bytes)?;
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("content digest mismatch (truncated or corrupted)".into()));
    }
    if header.registry_digest != learner.registry.digest() {
        return Err(Error::Checkpoint("label registry differs from the one trained on".into()));
    }
    let expected = config_digest(&learner.config, learner.encoder.config())?;
    if header.config_digest != expected {
        return Err(Error::Checkpoint("model or backbone configuration differs".into()));
    }
    if header.backbone_checksum != learner.encoder.checksum() {
        return Err(Error::Checkpoint("backbone weights differ".into()));
    }
    if header.param_names != learner.layout().names() {
        return Err(Error::Checkpoint("parameter layout differs".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    r.bytes()?;
    r.bytes()?;
    let tasks_done = r.u64()? as usize;
    let adam_step = r.u64()?;
    let seen: Vec<bool> = r.bytes()?.iter().map(|&b| b != 0).collect();
    let n = r.u64()? as usize;
    if n != learner.layout().len() {
        return Err(Error::Checkpoint(format!("{n} parameter arrays, expected {}", learner.layout().len())));
    }
    let bits = header.precision_bits;
    if bits != 32 && bits != 64 {
        return Err(Error::Checkpoint(format!("unsupported precision {bits}")));
    }
    let (mut params, mut adam_m, mut adam_v) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let rank = r.len(8)?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.reals::<T>(bits)?;
        let m = r.reals::<T>(bits)?;
        let v = r.reals::<T>(bits)?;
        if m.len() != data.len() || v.len() != data.len() {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        params.push(Tensor::new(shape, data)?);
        adam_m.push(m);
        adam_v.push(v);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let state = ModelState {
        params,
        adam_m,
        adam_v,
        adam_step,
        seen,
        tasks_done,
    };
    learner.check_state(&state)?;
    Ok(state)
}

pub fn save<T: Real>(learner: &Learner<T>, state: &ModelState<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(learner, state)?)?;
    Ok(())
}

pub fn load<T: Real>(learner: &Learner<T>, path: &Path) -> Result<ModelState<T>> {
    from_bytes(learner, &std::fs::read(path)?)
}

/// Registry embedded in a checkpoint.
pub fn read_registry(bytes: &[u8]) -> Result<crate::data::LabelRegistry> {
    read_header(bytes)?;
    let mut r = Reader { buf: bytes, pos: 8 };
    r.bytes()?;
    Ok(serde_json::from_slice(r.bytes()?)?)
}
