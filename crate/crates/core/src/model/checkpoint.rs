//! Binary checkpoint: magic, u64 LE header length, JSON header, then every
//! tensor as contiguous little-endian floats in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::optim::{AdamWState, Moments};
use crate::tensor::{Float, Param, ParamStore, DTYPE_NAME};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PHKITCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const FLOAT_BYTES: usize = std::mem::size_of::<Float>();

/// Model weights, auxiliary heads and optimizer state at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamStore,
    /// Weights outside the transformer trunk (reward or value heads).
    pub extra: ParamStore,
    pub optimizers: BTreeMap<String, AdamWState>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: String,
    kind: String,
    config: ModelConfig,
    step: u64,
    meta: BTreeMap<String, serde_json::Value>,
    optimizer_steps: BTreeMap<String, u64>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Checkpoint {
    pub fn from_model(kind: &str, model: &Model, step: u64) -> Self {
        Self {
            kind: kind.to_string(),
            config: *model.config(),
            step,
            params: model.params().clone(),
            extra: ParamStore::new(),
            optimizers: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config, self.params.clone())
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[Float])> {
        let mut out = Vec::new();
        for (n, p) in self.params.iter() {
            out.push((format!("param/{n}"), p.shape.clone(), p.data.as_slice()));
        }
        for (n, p) in self.extra.iter() {
            out.push((format!("extra/{n}"), p.shape.clone(), p.data.as_slice()));
        }
        for (group, st) in &self.optimizers {
            for (n, m) in &st.moments {
                out.push((format!("adam.{group}.m/{n}"), vec![m.m.len()], m.m.as_slice()));
                out.push((format!("adam.{group}.v/{n}"), vec![m.v.len()], m.v.as_slice()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = Entry { name: name.clone(), shape: shape.clone(), offset };
                offset += data.len();
                e
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            dtype: DTYPE_NAME.to_string(),
            kind: self.kind.clone(),
            config: self.config,
            step: self.step,
            meta: self.meta.clone(),
            optimizer_steps: self.optimizers.iter().map(|(g, s)| (g.clone(), s.step)).collect(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * FLOAT_BYTES);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for x in *data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.len() - 16;
        if hlen > body {
            return Err(bad(format!("header length {hlen} exceeds file body of {body} bytes")));
        }
        let header: Header =
            serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| bad(format!("corrupt header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {} (expected {CHECKPOINT_VERSION})", header.version)));
        }
        if header.dtype != DTYPE_NAME {
            return Err(bad(format!("stored as {}, this build uses {DTYPE_NAME}", header.dtype)));
        }
        header.config.validate()?;
        let data = &bytes[16 + hlen..];
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if data.len() != total * FLOAT_BYTES {
            return Err(bad(format!("expected {} data bytes, found {} (truncated?)", total * FLOAT_BYTES, data.len())));
        }
        let mut ck = Checkpoint {
            kind: header.kind,
            config: header.config,
            step: header.step,
            params: ParamStore::new(),
            extra: ParamStore::new(),
            optimizers: BTreeMap::new(),
            meta: header.meta,
        };
        let mut expect = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expect {
                return Err(bad(format!("{}: offset {} out of sequence", e.name, e.offset)));
            }
            expect += n;
            let values: Vec<Float> = data[e.offset * FLOAT_BYTES..(e.offset + n) * FLOAT_BYTES]
                .chunks_exact(FLOAT_BYTES)
                .map(|c| Float::from_le_bytes(c.try_into().expect("float width")))
                .collect();
            let (kind, name) = e.name.split_once('/').ok_or_else(|| bad(format!("bad tensor name {:?}", e.name)))?;
            match kind {
                "param" => ck.params.insert(name, Param::new(&e.shape, values)?),
                "extra" => ck.extra.insert(name, Param::new(&e.shape, values)?),
                _ => {
                    let (group, which) = kind
                        .strip_prefix("adam.")
                        .and_then(|k| k.rsplit_once('.'))
                        .ok_or_else(|| bad(format!("bad tensor name {:?}", e.name)))?;
                    let st = ck.optimizers.entry(group.to_string()).or_insert_with(|| AdamWState {
                        step: header.optimizer_steps.get(group).copied().unwrap_or(0),
                        moments: BTreeMap::new(),
                    });
                    let m = st.moments.entry(name.to_string()).or_insert(Moments { m: Vec::new(), v: Vec::new() });
                    match which {
                        "m" => m.m = values,
                        "v" => m.v = values,
                        _ => return Err(bad(format!("bad tensor name {:?}", e.name))),
                    }
                }
            }
        }
        for (g, &step) in &header.optimizer_steps {
            ck.optimizers.entry(g.clone()).or_insert_with(|| AdamWState { step, moments: BTreeMap::new() });
        }
        Ok(ck)
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
