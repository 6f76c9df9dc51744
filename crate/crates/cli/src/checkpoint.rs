//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "KALMCKPT"
//! version    u32
//! header     u64 length + UTF-8 JSON
//! tensors    u32 count, then per tensor:
//!            u32 name length, name, u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Tensor names are prefixed by section: `best/` holds the parameters to
//! evaluate, `current/` and `average/` the optimizer iterates needed to
//! resume training.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use kalm::corpus::VocabularySet;
use kalm::model::{ModelConfig, ModelParams};
use kalm::numerics::ParamStore;
use kalm::training::{EpochRecord, TrainConfig, TrainState};
use kalm::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"KALMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    embed_dim: usize,
    hidden_dim: usize,
    layers: usize,
    type_dim: usize,
    bidirectional: bool,
    feedback: bool,
    init_range: f64,
    sizes: Vec<usize>,
    num_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EpochEntry {
    epoch: usize,
    train_loss: f64,
    train_objective: f64,
    valid_perplexity: f64,
    averaging: bool,
    grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainingHeader {
    epoch: usize,
    averaged_steps: u64,
    averaging_start: Option<usize>,
    best_epoch: usize,
    best_valid_perplexity: f64,
    since_best: usize,
    initial_valid_perplexity: f64,
    stopped: bool,
    history: Vec<EpochEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelHeader,
    vocab_sha256: String,
    seed: u64,
    train_config: BTreeMap<String, String>,
    training: Option<TrainingHeader>,
}

/// Model parameters plus the training state needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub vocab_sha256: String,
    pub train_config: TrainConfig,
    /// `best` inside the state always equals `model`'s parameters.
    pub state: Option<TrainState>,
}

pub fn vocab_hash(vocab: &VocabularySet) -> String {
    hex::encode(Sha256::digest(vocab.serialize().as_bytes()))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_store(out: &mut Vec<u8>, section: &str, store: &ParamStore) {
    for id in store.ids() {
        let name = format!("{section}/{}", store.name(id));
        let (rows, cols) = store.shape(id);
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u64(out, rows as u64);
        put_u64(out, cols as u64);
        for v in store.get(id) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(self.path, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    fn header(&self) -> Header {
        let c = self.model.config();
        let training = self.state.as_ref().map(|s| TrainingHeader {
            epoch: s.epoch,
            averaged_steps: s.averaged_steps,
            averaging_start: s.averaging_start,
            best_epoch: s.best_epoch,
            best_valid_perplexity: s.best_valid_perplexity,
            since_best: s.since_best,
            initial_valid_perplexity: s.initial_valid_perplexity,
            stopped: s.stopped,
            history: s
                .history
                .iter()
                .map(|r| EpochEntry {
                    epoch: r.epoch,
                    train_loss: r.train_loss,
                    train_objective: r.train_objective,
                    valid_perplexity: r.valid_perplexity,
                    averaging: r.averaging,
                    grad_norm: r.grad_norm,
                })
                .collect(),
        });
        Header {
            format_version: FORMAT_VERSION,
            model: ModelHeader {
                embed_dim: c.embed_dim,
                hidden_dim: c.hidden_dim,
                layers: c.layers,
                type_dim: c.type_dim,
                bidirectional: c.bidirectional,
                feedback: c.feedback,
                init_range: c.init_range,
                sizes: self.model.sizes().to_vec(),
                num_rows: self.model.num_rows(),
            },
            vocab_sha256: self.vocab_sha256.clone(),
            seed: self.train_config.seed,
            train_config: self
                .train_config
                .entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            training,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&self.header()).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(header.as_bytes());
        let store = self.model.store();
        let mut sections = vec![("best", store)];
        if let Some(s) = &self.state {
            sections.push(("current", &s.current));
            if let Some(avg) = &s.average {
                sections.push(("average", avg));
            }
        }
        put_u32(&mut out, (sections.len() * store.len()) as u32);
        for (name, st) in sections {
            put_store(&mut out, name, st);
        }
        out
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = temp_sibling(path);
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(corrupt(path, "not a kalm checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(path, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| corrupt(path, format!("bad header: {e}")))?;

        let m = &header.model;
        let config = ModelConfig {
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            layers: m.layers,
            type_dim: m.type_dim,
            bidirectional: m.bidirectional,
            feedback: m.feedback,
            init_range: m.init_range,
        };
        let mut model = ModelParams::zeroed(config, m.sizes.clone(), m.num_rows)?;
        let mut train_config = TrainConfig::default();
        for (k, v) in &header.train_config {
            train_config.set(k, v)?;
        }

        let count = r.u32()? as usize;
        let mut sections: BTreeMap<String, ParamStore> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt(path, "tensor name is not UTF-8"))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let (section, pname) = name
                .split_once('/')
                .ok_or_else(|| corrupt(path, format!("tensor {name:?} has no section")))?;
            let store = sections
                .entry(section.to_string())
                .or_insert_with(|| model.store().clone());
            let id = store
                .find(pname)
                .ok_or_else(|| corrupt(path, format!("unexpected tensor {name:?}")))?;
            if store.shape(id) != (rows, cols) {
                return Err(corrupt(path, format!("tensor {name:?} has shape {rows}x{cols}")));
            }
            let raw = r.take(rows * cols * 8)?;
            for (dst, chunk) in store.get_mut(id).iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(corrupt(path, "trailing bytes after tensors"));
        }
        let best = sections
            .remove("best")
            .ok_or_else(|| corrupt(path, "no parameters in checkpoint"))?;
        model.replace_store(best.clone())?;
        let state = match header.training {
            None => None,
            Some(t) => Some(TrainState {
                epoch: t.epoch,
                current: sections
                    .remove("current")
                    .ok_or_else(|| corrupt(path, "training state without current parameters"))?,
                average: sections.remove("average"),
                averaged_steps: t.averaged_steps,
                averaging_start: t.averaging_start,
                best,
                best_epoch: t.best_epoch,
                best_valid_perplexity: t.best_valid_perplexity,
                since_best: t.since_best,
                initial_valid_perplexity: t.initial_valid_perplexity,
                history: t
                    .history
                    .into_iter()
                    .map(|e| EpochRecord {
                        epoch: e.epoch,
                        train_loss: e.train_loss,
                        train_objective: e.train_objective,
                        valid_perplexity: e.valid_perplexity,
                        averaging: e.averaging,
                        grad_norm: e.grad_norm,
                        seconds: 0.0,
                    })
                    .collect(),
                stopped: t.stopped,
            }),
        };
        Ok(Checkpoint {
            model,
            vocab_sha256: header.vocab_sha256,
            train_config,
            state,
        })
    }

    /// Loads a checkpoint; with `vocab` given, refuses one trained on a
    /// different vocabulary.
    pub fn load(path: &Path, vocab: Option<&VocabularySet>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes, path)?;
        if let Some(v) = vocab {
            let hash = vocab_hash(v);
            if hash != ckpt.vocab_sha256 || !ckpt.model.fits(v) {
                return Err(Error::Config(format!(
                    "{} was trained with vocabulary {}, not {hash}",
                    path.display(),
                    ckpt.vocab_sha256
                )));
            }
        }
        Ok(ckpt)
    }
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}
