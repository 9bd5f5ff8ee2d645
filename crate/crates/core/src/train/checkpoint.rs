//! Checkpoint directories: `manifest.json` describing every array and
//! `payload.bin` holding them as little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, Weights};
use crate::tensor::Tensor;

use super::optim::AdamW;
use super::TrainConfig;

pub const FORMAT: &str = "pointspot-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "payload.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub decay: Vec<bool>,
    /// First moments, then second moments, one entry per parameter each.
    pub moments: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub seed: u64,
    pub arrays: Vec<ArrayEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub payload_len: usize,
    pub payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub weights: Weights<f32>,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub seed: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

struct Packer {
    data: Vec<u8>,
    len: usize,
}

impl Packer {
    fn push(&mut self, name: &str, shape: &[usize], values: &[f32]) -> ArrayEntry {
        let e = ArrayEntry { name: name.to_string(), shape: shape.to_vec(), offset: self.len };
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
        self.len += values.len();
        e
    }
}

pub fn save(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut pk = Packer { data: Vec::new(), len: 0 };
    let store = &ck.weights.store;
    let arrays: Vec<ArrayEntry> = store.iter().map(|(_, n, t)| pk.push(n, t.shape(), t.data())).collect();
    let optimizer = ck.optimizer.as_ref().map(|o| {
        let mut moments = Vec::new();
        for (prefix, set) in [("m", &o.m), ("v", &o.v)] {
            for ((_, n, t), vals) in store.iter().zip(set) {
                moments.push(pk.push(&format!("{}/{}", prefix, n), t.shape(), vals));
            }
        }
        OptimizerEntry {
            t: o.t,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            decay: o.decay.clone(),
            moments,
        }
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        model: ck.weights.config.clone(),
        train: ck.train.clone(),
        step: ck.step,
        seed: ck.seed,
        arrays,
        optimizer,
        payload_len: pk.len,
        payload_sha256: hex(&Sha256::digest(&pk.data)),
    };
    let path = dir.join(PAYLOAD);
    fs::write(&path, &pk.data).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_array(payload: &[f32], e: &ArrayEntry) -> Result<Tensor<f32>> {
    let n: usize = e.shape.iter().product();
    let end = e.offset.checked_add(n).filter(|&end| end <= payload.len());
    let Some(end) = end else {
        return Err(Error::checkpoint(&e.name, "extends past the payload"));
    };
    Tensor::new(e.shape.clone(), payload[e.offset..end].to_vec())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::checkpoint("manifest", e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::checkpoint("format", format!("expected `{}`, found `{}`", FORMAT, m.format)));
    }
    if m.version != VERSION {
        return Err(Error::checkpoint("version", format!("expected {}, found {}", VERSION, m.version)));
    }
    m.model.validate()?;
    let path = dir.join(PAYLOAD);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != m.payload_len * 4 {
        return Err(Error::checkpoint("payload_len", format!("manifest says {} floats, file has {} bytes", m.payload_len, bytes.len())));
    }
    if hex(&Sha256::digest(&bytes)) != m.payload_sha256 {
        return Err(Error::checkpoint("payload_sha256", "payload checksum mismatch"));
    }
    let payload: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

    let mut store = ParamStore::default();
    for e in &m.arrays {
        store.add(e.name.clone(), read_array(&payload, e)?);
    }
    let weights = Weights::from_store(&m.model, store)?;
    let optimizer = match &m.optimizer {
        None => None,
        Some(o) => {
            let n = weights.store.len();
            if o.moments.len() != 2 * n || o.decay.len() != n {
                return Err(Error::checkpoint("optimizer.moments", format!("expected {} entries", 2 * n)));
            }
            let mut sets = [Vec::new(), Vec::new()];
            for (i, e) in o.moments.iter().enumerate() {
                let (_, name, t) = weights.store.iter().nth(i % n).expect("index in range");
                let prefix = if i < n { "m" } else { "v" };
                if e.name != format!("{}/{}", prefix, name) || e.shape != t.shape() {
                    return Err(Error::checkpoint(&e.name, format!("expected {}/{} with shape {:?}", prefix, name, t.shape())));
                }
                sets[i / n].push(read_array(&payload, e)?.into_data());
            }
            let [mm, vv] = sets;
            Some(AdamW {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                t: o.t,
                m: mm,
                v: vv,
                decay: o.decay.clone(),
            })
        }
    };
    Ok(Checkpoint { weights, train: m.train, optimizer, step: m.step, seed: m.seed })
}

/// Weights only, for inference.
pub fn load_weights(dir: &Path) -> Result<Weights<f32>> {
    load(dir).map(|c| c.weights)
}
