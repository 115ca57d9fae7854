//! Binary checkpoint container.
//!
//! Layout: the magic bytes `LDRS`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::BatchPosition;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::net::{NetConfig, NetParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LDRS";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Base,
    Lora,
}

/// Everything needed to continue a seeded run where it stopped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub batches: BatchPosition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub set: String,
    pub target: String,
    pub rank: usize,
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: Kind,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub adapters: Vec<AdapterEntry>,
    /// Optimizer step count and hyperparameters when moments are stored.
    #[serde(default)]
    pub optimizer: Option<serde_json::Value>,
    /// The training configuration the run was started with.
    #[serde(default)]
    pub train: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

/// Prefixes for optimizer moments stored next to their parameters.
pub const MOMENT1: &str = "adam.m.";
pub const MOMENT2: &str = "adam.v.";

impl Checkpoint {
    pub fn new(kind: Kind, schedule: ScheduleConfig, net: NetConfig) -> Self {
        Checkpoint {
            header: Header {
                kind,
                schedule,
                net,
                step: 0,
                rng: RngState::default(),
                tensors: Vec::new(),
                adapters: Vec::new(),
                optimizer: None,
                train: None,
            },
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Tensors whose names start with `prefix`, prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.header
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter_map(move |(e, t)| e.name.strip_prefix(prefix).map(|n| (n, t)))
    }

    pub fn base(params: &NetParams, schedule: ScheduleConfig) -> Self {
        let mut c = Self::new(Kind::Base, schedule, params.config());
        for (name, t) in params.iter() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn lora(adapters: &[LoraAdapter], schedule: ScheduleConfig, net: NetConfig) -> Self {
        let mut c = Self::new(Kind::Lora, schedule, net);
        for a in adapters {
            c.header.adapters.push(AdapterEntry {
                set: a.set.clone(),
                target: a.target.clone(),
                rank: a.rank,
                enabled: a.enabled,
            });
            let (an, bn) = a.var_names();
            c.push(&an, a.a.clone());
            c.push(&bn, a.b.clone());
        }
        c
    }

    /// Network parameters: every tensor without an optimizer prefix.
    pub fn params(&self) -> Result<NetParams> {
        if self.header.kind != Kind::Base {
            return Err(Error::config("checkpoint holds adapters, not base parameters"));
        }
        let tensors = self
            .header
            .tensors
            .iter()
            .zip(&self.tensors)
            .filter(|(e, _)| !e.name.starts_with(MOMENT1) && !e.name.starts_with(MOMENT2))
            .map(|(e, t)| (e.name.clone(), t.clone()))
            .collect();
        NetParams::from_tensors(self.header.net, tensors)
    }

    pub fn adapters(&self) -> Result<Vec<LoraAdapter>> {
        if self.header.kind != Kind::Lora {
            return Err(Error::config("checkpoint holds base parameters, not adapters"));
        }
        self.header
            .adapters
            .iter()
            .map(|e| {
                let probe = LoraAdapter::new(&e.set, &e.target, Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]))?;
                let (an, bn) = probe.var_names();
                let find = |n: &str| {
                    self.get(n)
                        .cloned()
                        .ok_or_else(|| Error::config(format!("adapter checkpoint lacks {n}")))
                };
                let mut a = LoraAdapter::new(&e.set, &e.target, find(&an)?, find(&bn)?)?;
                if a.rank != e.rank {
                    return Err(Error::config(format!(
                        "adapter {} has rank {} but header says {}",
                        e.target, a.rank, e.rank
                    )));
                }
                a.enabled = e.enabled;
                Ok(a)
            })
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format { offset, message };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fail(0, "not a checkpoint (missing LDRS magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fail(4, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(8, format!("header length {hlen} exceeds file")))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| fail(16, format!("bad header: {e}")))?;
        let mut pos = body;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(fail(bytes.len(), format!("payload truncated inside {}", e.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(&e.shape, data).map_err(|err| fail(pos, err.to_string()))?);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(fail(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
