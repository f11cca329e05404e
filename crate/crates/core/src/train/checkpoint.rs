//! Versioned little-endian checkpoint files.
//!
//! Layout: magic `MODNETCK`, version `u32`, SHA-256 of the body, body length `u64`, body.
//! The body holds a length-prefixed JSON header followed by named tensors
//! (`u32` name length, name, `u32` rank, `u64` extents, raw `f64` values).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::VocabSet;
use crate::error::{Error, Result};
use crate::lang::{Direction, Lang};
use crate::tensor::{AdamConfig, AdamState, MomentBuffers, ParamStore};
use crate::transformer::TransformerConfig;
use crate::zoo::{ModelKind, MultiModel};

use super::{EarlyStopState, TrainState};

pub const MAGIC: &[u8; 8] = b"MODNETCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: TransformerConfig,
    languages: Vec<Lang>,
    directions: Vec<Direction>,
    vocabs: VocabSet,
    seed: u64,
    frozen: Vec<String>,
    state: Option<StateHeader>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    step_in_epoch: usize,
    global_step: u64,
    adam: [f64; 3],
    adam_step: u64,
    adam_t: BTreeMap<String, u64>,
    early: EarlyStopState,
    epoch_stats: Vec<(Direction, f64, usize)>,
}

/// Serialized checkpoint bytes.
pub fn to_bytes(model: &MultiModel, state: Option<&TrainState>) -> Result<Vec<u8>> {
    let store = model.params();
    let frozen = store.ids().filter(|&id| store.is_frozen(id)).map(|id| store.name(id).to_string()).collect();
    let mut tensors: Vec<(String, Vec<usize>, &[f64])> =
        store.ids().map(|id| (store.name(id).to_string(), store.shape(id).to_vec(), store.values(id))).collect();
    let state_header = state.map(|s| {
        let mut adam_t = BTreeMap::new();
        for (id, mb) in s.adam.iter_moments() {
            let name = store.name(id);
            adam_t.insert(name.to_string(), mb.t);
            tensors.push((format!("adam.m/{name}"), store.shape(id).to_vec(), &mb.m));
            tensors.push((format!("adam.v/{name}"), store.shape(id).to_vec(), &mb.v));
        }
        let c = s.adam.config;
        StateHeader {
            epoch: s.epoch,
            step_in_epoch: s.step_in_epoch,
            global_step: s.global_step,
            adam: [c.beta1, c.beta2, c.eps],
            adam_step: s.adam.step(),
            adam_t,
            early: s.early.clone(),
            epoch_stats: s.epoch_stats.clone(),
        }
    });
    let header = Header {
        kind: model.kind(),
        config: model.config().clone(),
        languages: model.languages().to_vec(),
        directions: model.directions().to_vec(),
        vocabs: model.vocabs().clone(),
        seed: model.seed(),
        frozen,
        state: state_header,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::config(format!("checkpoint header: {e}")))?;
    let mut body = Vec::new();
    body.extend_from_slice(&(json.len() as u64).to_le_bytes());
    body.extend_from_slice(&json);
    body.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, shape, values) in &tensors {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            body.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in values.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(body.len() + 52);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn save(path: &Path, model: &MultiModel, state: Option<&TrainState>) -> Result<()> {
    let bytes = to_bytes(model, state)?;
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(MultiModel, Option<TrainState>)> {
    from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated at byte {} (needed {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| Error::Corrupt(format!("implausible {what} {n}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(MultiModel, Option<TrainState>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| Error::Corrupt("file too short".into()))? != MAGIC {
        return Err(Error::Corrupt("bad magic; not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let digest = r.take(32)?;
    let body_len = r.len("body length")?;
    let body = r.take(body_len)?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after body".into()));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("digest mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let json_len = r.len("header length")?;
    let header: Header = serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    let count = r.len("tensor count")?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len("extent")).collect::<Result<Vec<usize>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.insert(name, (shape, values));
    }
    let mut model = MultiModel::assemble(header.kind, &header.languages, &header.directions, &header.config, header.vocabs, header.seed)
        .map_err(|e| Error::Corrupt(format!("cannot rebuild model: {e}")))?;
    let store = model.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let (shape, values) = tensors.remove(&name).ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))?;
        if shape != store.shape(id) {
            return Err(Error::Corrupt(format!("tensor `{name}` has shape {shape:?}, expected {:?}", store.shape(id))));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corrupt(format!("tensor `{name}` holds non-finite values")));
        }
        store.values_mut(id).copy_from_slice(&values);
    }
    for name in &header.frozen {
        let id = store.id(name).ok_or_else(|| Error::Corrupt(format!("unknown frozen parameter `{name}`")))?;
        store.set_frozen(id, true);
    }
    let state = header.state.map(|s| restore_state(s, store, &mut tensors)).transpose()?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor `{extra}`")));
    }
    Ok((model, state))
}

fn restore_state(s: StateHeader, store: &ParamStore, tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<TrainState> {
    let mut moments = BTreeMap::new();
    for (name, t) in s.adam_t {
        let id = store.id(&name).ok_or_else(|| Error::Corrupt(format!("optimizer state for unknown `{name}`")))?;
        let mut get = |prefix: &str| -> Result<Vec<f64>> {
            let (shape, v) =
                tensors.remove(&format!("{prefix}/{name}")).ok_or_else(|| Error::Corrupt(format!("missing {prefix} for `{name}`")))?;
            if shape != store.shape(id) {
                return Err(Error::Corrupt(format!("{prefix} for `{name}` has the wrong shape")));
            }
            Ok(v)
        };
        let m = get("adam.m")?;
        let v = get("adam.v")?;
        moments.insert(id, MomentBuffers { m, v, t });
    }
    let [beta1, beta2, eps] = s.adam;
    let mut adam = AdamState::new(AdamConfig { beta1, beta2, eps });
    adam.restore(s.adam_step, moments);
    Ok(TrainState {
        epoch: s.epoch,
        step_in_epoch: s.step_in_epoch,
        global_step: s.global_step,
        adam,
        early: s.early,
        epoch_stats: s.epoch_stats,
    })
}
