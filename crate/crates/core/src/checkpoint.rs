//! Checkpoint archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "FSGCKPT\0"
//! version    u32
//! header_len u32
//! header     JSON: net config, palette version, stage, train state,
//!            optimizer settings and the tensor index (key, shape, offset)
//! payload    f32 values of every indexed tensor, back to back
//! digest     32-byte SHA-256 of everything above
//! ```
//!
//! Tensor keys are `<network>/<parameter>` for weights and
//! `<optimizer>/m/<parameter>`, `<optimizer>/v/<parameter>` for Adam moments.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapegene_tensor::{Adam, AdamMoments, AdamSettings};

use crate::error::{Error, IoContext, Result};
use crate::labelspace::PALETTE_VERSION;
use crate::netzoo::{NamedTensor, NetConfig, Network, ParamBundle};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub moments: BTreeMap<String, AdamMoments<f32>>,
}

impl OptimizerState {
    pub fn from_adam(adam: &Adam<f32>) -> Self {
        OptimizerState {
            lr: adam.settings.lr,
            beta1: adam.settings.beta1,
            beta2: adam.settings.beta2,
            eps: adam.settings.eps,
            steps: adam.steps,
            moments: adam.moments.clone(),
        }
    }

    pub fn to_adam(&self) -> Adam<f32> {
        let mut adam = Adam::new(AdamSettings {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        });
        adam.steps = self.steps;
        adam.moments = self.moments.clone();
        adam
    }
}

/// Every network, optimizer and the training state of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub net_config: NetConfig,
    pub palette_version: String,
    pub stage: String,
    pub networks: BTreeMap<String, ParamBundle>,
    pub optimizers: BTreeMap<String, OptimizerState>,
    pub train_state: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    key: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net_config: NetConfig,
    net_fingerprint: String,
    palette_version: String,
    stage: String,
    fingerprints: BTreeMap<String, String>,
    optimizers: BTreeMap<String, OptimizerHeader>,
    train_state: serde_json::Value,
    tensors: Vec<IndexEntry>,
    payload_len: usize,
}

impl CheckpointBundle {
    pub fn new(net_config: &NetConfig, stage: &str) -> Self {
        CheckpointBundle {
            net_config: net_config.clone(),
            palette_version: PALETTE_VERSION.to_string(),
            stage: stage.to_string(),
            networks: BTreeMap::new(),
            optimizers: BTreeMap::new(),
            train_state: serde_json::Value::Null,
        }
    }

    /// Stores `net` under `key`; keys must not contain `/`.
    pub fn put_network<N: Network<f32> + ?Sized>(&mut self, key: &str, net: &N) {
        assert!(!key.contains('/'), "network key {key:?} contains '/'");
        self.networks.insert(key.to_string(), ParamBundle::from_network(net));
    }

    /// Loads `key` into `net`; fails if missing or built for another
    /// architecture.
    pub fn load_network<N: Network<f32> + ?Sized>(&self, key: &str, net: &mut N) -> Result<()> {
        self.networks
            .get(key)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no network {key:?}")))?
            .load_into(net)
    }

    pub fn has_network(&self, key: &str) -> bool {
        self.networks.contains_key(key)
    }

    pub fn put_optimizer(&mut self, key: &str, adam: &Adam<f32>) {
        assert!(!key.contains('/'), "optimizer key {key:?} contains '/'");
        self.optimizers.insert(key.to_string(), OptimizerState::from_adam(adam));
    }

    pub fn optimizer(&self, key: &str) -> Result<Adam<f32>> {
        self.optimizers
            .get(key)
            .map(OptimizerState::to_adam)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no optimizer {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<f32> = Vec::new();
        let mut index = Vec::new();
        let mut push = |key: String, shape: Vec<usize>, data: &[f32], payload: &mut Vec<f32>| {
            index.push(IndexEntry {
                key,
                shape,
                offset: payload.len(),
            });
            payload.extend_from_slice(data);
        };
        let mut fingerprints = BTreeMap::new();
        for (net, bundle) in &self.networks {
            fingerprints.insert(net.clone(), bundle.fingerprint.clone());
            for t in &bundle.tensors {
                push(format!("{net}/{}", t.name), t.shape.clone(), &t.data, &mut payload);
            }
        }
        let mut optimizers = BTreeMap::new();
        for (name, opt) in &self.optimizers {
            optimizers.insert(
                name.clone(),
                OptimizerHeader {
                    lr: opt.lr,
                    beta1: opt.beta1,
                    beta2: opt.beta2,
                    eps: opt.eps,
                    steps: opt.steps,
                },
            );
            for (param, m) in &opt.moments {
                push(format!("{name}/m/{param}"), vec![m.m.len()], &m.m, &mut payload);
                push(format!("{name}/v/{param}"), vec![m.v.len()], &m.v, &mut payload);
            }
        }
        let header = Header {
            net_config: self.net_config.clone(),
            net_fingerprint: self.net_config.fingerprint(),
            palette_version: self.palette_version.clone(),
            stage: self.stage.clone(),
            fingerprints,
            optimizers,
            train_state: self.train_state.clone(),
            tensors: index,
            payload_len: payload.len(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * payload.len() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptArchive {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 + 32 {
            return Err(corrupt(format!("only {} bytes", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch (truncated or modified)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes"));
        let version = word(8);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let header_len = word(12) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header overruns file".into()))?;
        let header: Header =
            serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let raw = &body[header_end..];
        if raw.len() != 4 * header.payload_len {
            return Err(corrupt(format!("payload has {} bytes, expected {}", raw.len(), 4 * header.payload_len)));
        }
        if header.net_fingerprint != header.net_config.fingerprint() {
            return Err(Error::Fingerprint {
                expected: header.net_config.fingerprint(),
                found: header.net_fingerprint,
            });
        }
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut networks: BTreeMap<String, ParamBundle> = header
            .fingerprints
            .iter()
            .map(|(k, fp)| {
                (
                    k.clone(),
                    ParamBundle {
                        fingerprint: fp.clone(),
                        tensors: Vec::new(),
                    },
                )
            })
            .collect();
        let mut optimizers: BTreeMap<String, OptimizerState> = header
            .optimizers
            .iter()
            .map(|(k, h)| {
                (
                    k.clone(),
                    OptimizerState {
                        lr: h.lr,
                        beta1: h.beta1,
                        beta2: h.beta2,
                        eps: h.eps,
                        steps: h.steps,
                        moments: BTreeMap::new(),
                    },
                )
            })
            .collect();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload
                .get(e.offset..e.offset + n)
                .ok_or_else(|| corrupt(format!("tensor {} out of bounds", e.key)))?
                .to_vec();
            let (owner, rest) = e
                .key
                .split_once('/')
                .ok_or_else(|| corrupt(format!("bad key {}", e.key)))?;
            if let Some(bundle) = networks.get_mut(owner) {
                bundle.tensors.push(NamedTensor {
                    name: rest.to_string(),
                    shape: e.shape.clone(),
                    data,
                });
            } else if let Some(opt) = optimizers.get_mut(owner) {
                let (which, param) = rest
                    .split_once('/')
                    .ok_or_else(|| corrupt(format!("bad key {}", e.key)))?;
                let entry = opt.moments.entry(param.to_string()).or_insert_with(|| AdamMoments {
                    m: Vec::new(),
                    v: Vec::new(),
                });
                match which {
                    "m" => entry.m = data,
                    "v" => entry.v = data,
                    _ => return Err(corrupt(format!("bad key {}", e.key))),
                }
            } else {
                return Err(corrupt(format!("tensor {} has no owner", e.key)));
            }
        }
        Ok(CheckpointBundle {
            net_config: header.net_config,
            palette_version: header.palette_version,
            stage: header.stage,
            networks,
            optimizers,
            train_state: header.train_state,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks that the archive was written for `expected`.
    pub fn load_for(path: &Path, expected: &NetConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.check_config(expected)?;
        Ok(ckpt)
    }

    pub fn check_config(&self, expected: &NetConfig) -> Result<()> {
        if self.net_config.fingerprint() != expected.fingerprint() {
            return Err(Error::Fingerprint {
                expected: expected.fingerprint(),
                found: self.net_config.fingerprint(),
            });
        }
        if self.palette_version != PALETTE_VERSION {
            return Err(Error::Fingerprint {
                expected: PALETTE_VERSION.to_string(),
                found: self.palette_version.clone(),
            });
        }
        Ok(())
    }

    /// Digest of the whole archive content, used to identify a model.
    pub fn digest(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(bytes[bytes.len() - 32..].iter().map(|b| format!("{b:02x}")).collect())
    }
}
