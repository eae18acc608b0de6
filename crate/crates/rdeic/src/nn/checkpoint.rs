//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RDCK" | version: u16 | meta_len: u32 | meta JSON | count: u32 |
//!   repeated: name_len u16 | name | ndim u8 | dims u32... | f32 data
//! ```
//!
//! The JSON meta block holds the topology descriptor, schedule
//! parameters, the latent normalization scale, the training-config hash,
//! and the training progress marker. The model identifier hash used in
//! bitstream headers is the SHA-256 of the serialized container.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::models::{Networks, Topology};
use crate::nn::params::ParamStore;
use crate::schedule::{NoiseSchedule, RelayWeights, ScheduleConfig};

const MAGIC: &[u8; 4] = b"RDCK";
const VERSION: u16 = 1;

/// How far through the training pipeline a checkpoint has progressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Fresh,
    Autoencoder,
    BaseDenoiser,
    Stage1,
    Stage2,
}

/// Whether the reconstruction loop starts from the noised compressed
/// latent (relay) or from pure noise over the full schedule (the
/// ablation baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    #[default]
    Relay,
    PureNoise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub topology: Topology,
    pub schedule: ScheduleConfig,
    pub latent_scale: f32,
    pub lambda_r: f64,
    pub stage: TrainStage,
    pub start_mode: StartMode,
    pub config_hash: String,
}

/// A complete model: parameters plus everything needed to run them.
#[derive(Debug, Clone)]
pub struct Model {
    pub meta: ModelMeta,
    pub store: ParamStore,
}

impl Model {
    pub fn new(topology: Topology, schedule: ScheduleConfig, seed: u64) -> Self {
        let nets = Networks::new(topology.clone());
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(seed);
        nets.register(&mut store, &mut rng);
        Model {
            meta: ModelMeta {
                topology,
                schedule,
                latent_scale: 1.0,
                lambda_r: 1.0,
                stage: TrainStage::Fresh,
                start_mode: StartMode::Relay,
                config_hash: String::new(),
            },
            store,
        }
    }

    pub fn networks(&self) -> Networks {
        Networks::new(self.meta.topology.clone())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_config(&self.meta.schedule)
    }

    pub fn relay_weights(&self) -> Result<(NoiseSchedule, RelayWeights)> {
        let s = self.schedule()?;
        let horizon = match self.meta.start_mode {
            StartMode::Relay => self.meta.schedule.relay_n,
            StartMode::PureNoise => self.meta.schedule.steps,
        };
        let w = s.relay_weights(horizon)?;
        Ok((s, w))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for p in self.store.params() {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.value.ndim() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.as_slice().expect("contiguous param") {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let meta: ModelMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("meta parse: {e}")))?;
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
            }
            let len: usize = dims.iter().product();
            let raw = r.take(len * 4)?;
            let mut data = Vec::with_capacity(len);
            for chunk in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Checkpoint(format!("tensor shape: {e}")))?;
            store.insert(&name, arr, false);
        }
        Ok(Model { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Model identifier hash recorded in bitstream headers.
    pub fn identity_hash(&self) -> Result<u64> {
        let bytes = self.to_bytes()?;
        let digest = Sha256::digest(&bytes);
        Ok(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }

    /// Parameter-name predicate helpers for trainability groups.
    pub fn is_autoencoder(name: &str) -> bool {
        name.starts_with("enc.") || name.starts_with("dec.")
    }

    pub fn is_base_denoiser(name: &str) -> bool {
        name.starts_with("den.")
    }

    pub fn is_codec(name: &str) -> bool {
        ["ga.", "gs.", "ha.", "hs.", "cm.", "ctl.", "codebook."]
            .iter()
            .any(|p| name.starts_with(p))
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Hash of a training-config serialization, stored in checkpoints and
/// compared when resuming.
pub fn config_hash(serialized: &str) -> String {
    let digest = Sha256::digest(serialized.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Snapshot-compare helper for frozen-weights contracts.
pub fn params_bit_identical(
    before: &[(String, Vec<f32>)],
    store: &ParamStore,
) -> bool {
    !before.is_empty()
        && before.iter().all(|(name, saved)| {
            let cur = store.get(name);
            let cur_slice = cur.as_slice().unwrap();
            let ok = saved.len() == cur_slice.len()
                && saved
                    .iter()
                    .zip(cur_slice.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !ok {
                eprintln!("parameter {name} changed");
            }
            ok
        })
}
