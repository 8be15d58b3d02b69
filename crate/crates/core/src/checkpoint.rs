//! Binary checkpoint: JSON header, raw little-endian parameter and optimizer
//! blobs, and a trailing SHA-256 over everything before it.
//!
//! ```text
//! b"ANXCKPT\0" | u32 version | u64 header length | header JSON
//! | f32 parameter values, in header order
//! | per slot: u8 present, then f64 first and second moments
//! | 32-byte SHA-256
//! ```

use std::fs;
use std::path::Path;

use anatomix_tensor::optim::{AdamW, AdamWConfig, Moments};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::losses::Stage;
use crate::networks::{Group, Model, ModelConfig, Param};
use crate::{io_err, Error, Result, F};

const MAGIC: &[u8; 8] = b"ANXCKPT\0";
const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("corrupt RNG state".into());
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&self.seed, &mut seed).map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    slots: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    model: ModelConfig,
    params: Vec<Param>,
    frozen: Vec<Group>,
    optimizer: OptimHeader,
    rng: RngState,
    config_hash: String,
    step: u64,
    epoch: usize,
    best_score: Option<f64>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: Model,
    pub optimizer: AdamW,
    pub rng: RngState,
    pub config_hash: String,
    pub step: u64,
    pub epoch: usize,
    /// Model-selection score at the time of writing.
    pub best_score: Option<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let o = &self.optimizer;
        let header = Header {
            stage: self.stage,
            model: self.model.config.clone(),
            params: store.params.clone(),
            frozen: store.frozen_groups(),
            optimizer: OptimHeader {
                lr: o.config.lr,
                beta1: o.config.beta1,
                beta2: o.config.beta2,
                eps: o.config.eps,
                weight_decay: o.config.weight_decay,
                step: o.step,
                slots: o.num_slots(),
            },
            rng: self.rng.clone(),
            config_hash: self.config_hash.clone(),
            step: self.step,
            epoch: self.epoch,
            best_score: self.best_score,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &store.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in 0..o.num_slots() {
            match o.slot(s) {
                None => out.push(0),
                Some(m) => {
                    out.push(1);
                    for v in m.m.iter().chain(&m.v) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        // Rebuild the architecture, then overwrite every parameter.
        use rand::SeedableRng;
        let mut model = Model::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        if model.store.params.len() != header.params.len() {
            return Err(bad("parameter count does not match the architecture"));
        }
        for (dst, src) in model.store.params.iter_mut().zip(&header.params) {
            if dst.name != src.name || dst.shape != src.shape || dst.group != src.group {
                return Err(Error::Checkpoint(format!("parameter `{}` does not match the architecture", src.name)));
            }
            let n = dst.data.len();
            dst.data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| F::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
        }
        for g in &header.frozen {
            model.store.freeze(*g);
        }
        let oh = &header.optimizer;
        let mut optimizer = AdamW::new(AdamWConfig {
            lr: oh.lr,
            beta1: oh.beta1,
            beta2: oh.beta2,
            eps: oh.eps,
            weight_decay: oh.weight_decay,
        });
        optimizer.step = oh.step;
        if oh.slots > model.store.params.len() {
            return Err(bad("more optimizer slots than parameters"));
        }
        for s in 0..oh.slots {
            if r.take(1)?[0] == 1 {
                let n = model.store.params[s].data.len();
                let vals: Vec<f64> = r
                    .take(n * 16)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let (m, v) = vals.split_at(n);
                optimizer.set_slot(s, Moments { m: m.to_vec(), v: v.to_vec() });
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        // Re-validate the RNG state now rather than on resume.
        header.rng.restore()?;
        Ok(Self {
            stage: header.stage,
            model,
            optimizer,
            rng: header.rng,
            config_hash: header.config_hash,
            step: header.step,
            epoch: header.epoch,
            best_score: header.best_score,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
