//! Versioned binary checkpoints: model config, parameters and optimizer state.
//!
//! All integers and floats are little-endian.
//!
//! | size      | field                                          |
//! |-----------|------------------------------------------------|
//! | 4         | magic `MTCK`                                   |
//! | 2         | version `u16` = 1                              |
//! | 4         | config length `n` (`u32`)                      |
//! | n         | model config as `key = value` lines (UTF-8)    |
//! | 8         | epochs completed (`u64`)                       |
//! | 8         | optimizer step (`u64`)                         |
//! | 8         | momentum (`f64`)                               |
//! | 8         | learning rate of the last step (`f64`)         |
//! | 4         | tensor count `P` (`u32`)                       |
//! | P records | parameters, in canonical order                 |
//! | P records | momentum buffers, same names and order         |
//!
//! A tensor record is a `u16` name length, the name bytes, a `u8` rank, one
//! `u32` per dimension and then the `f64` values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::config::{model_from_text, model_to_text, ConfigError};
use crate::model::{Model, ModelConfig, ModelError, ModelParams, PARAM_NAMES};
use crate::train::OptimState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MTCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?} at offset 0, expected \"MTCK\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} at offset 4")]
    Version { found: u16 },
    #[error("truncated at offset {offset}: need {need} more bytes")]
    Truncated { offset: usize, need: usize },
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
    #[error("tensor {index}: expected `{expected}`, found `{found}`")]
    Name {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("tensor `{name}`: shape {found:?} does not match config shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optim: OptimState,
    pub epochs_done: u64,
}

impl Checkpoint {
    pub fn new(model: &Model, optim: &OptimState, epochs_done: u64) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            optim: optim.clone(),
            epochs_done,
        }
    }

    pub fn model(&self) -> Result<Model, CheckpointError> {
        Ok(Model::from_params(
            self.config.clone(),
            self.params.clone(),
        )?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = model_to_text(&self.config);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.epochs_done.to_le_bytes());
        out.extend_from_slice(&self.optim.step.to_le_bytes());
        out.extend_from_slice(&self.optim.momentum.to_le_bytes());
        out.extend_from_slice(&self.optim.lr.to_le_bytes());
        out.extend_from_slice(&(PARAM_NAMES.len() as u32).to_le_bytes());
        let tensors = self.params.tensors();
        for (name, t) in PARAM_NAMES.iter().zip(tensors) {
            write_tensor(&mut out, name, t);
        }
        for (name, t) in PARAM_NAMES.iter().zip(&self.optim.velocity) {
            write_tensor(&mut out, name, t);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|e| CheckpointError::Malformed(format!("config is not UTF-8: {e}")))?;
        let config = model_from_text(text)?;
        config.validate()?;
        let epochs_done = r.u64()?;
        let step = r.u64()?;
        let momentum = r.f64()?;
        let lr = r.f64()?;
        let count = r.u32()? as usize;
        if count != PARAM_NAMES.len() {
            return Err(CheckpointError::Malformed(format!(
                "{count} tensors, expected {}",
                PARAM_NAMES.len()
            )));
        }

        // Shapes come from a freshly built parameter set for this config.
        let mut params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        for (index, slot) in params.tensors_mut().into_iter().enumerate() {
            *slot = r.tensor(index, slot.shape())?;
        }
        let mut velocity = Vec::with_capacity(count);
        for (index, p) in params.tensors().into_iter().enumerate() {
            velocity.push(r.tensor(index, p.shape())?);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            config,
            params,
            optim: OptimState {
                velocity,
                momentum,
                lr,
                step,
            },
            epochs_done,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                need: n - (self.bytes.len() - self.pos),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, index: usize, expected: &[usize]) -> Result<Tensor, CheckpointError> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8_lossy(self.take(name_len)?).into_owned();
        if name != PARAM_NAMES[index] {
            return Err(CheckpointError::Name {
                index,
                expected: PARAM_NAMES[index].to_string(),
                found: name,
            });
        }
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        if shape != expected {
            return Err(CheckpointError::Shape {
                name,
                expected: expected.to_vec(),
                found: shape,
            });
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}
