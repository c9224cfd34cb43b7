//! Binary checkpoint format.
//!
//! Layout: magic `TRMO`, u32 version, u32 tensor count; per tensor a u16
//! name length, UTF-8 name, u8 rank, u64 dims and a raw little-endian f32
//! payload; then a JSON trailer with the model/train configs, step, rng
//! state and vocabulary. Tensors are stored at 32-bit precision regardless
//! of the working scalar type.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::model::{ConfigError, Model, ModelConfig};
use crate::scalar::{cast, Scalar};
use crate::train::TrainConfig;

const MAGIC: &[u8; 4] = b"TRMO";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"TRMO\"")]
    BadMagic,
    #[error("unsupported version {found} (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated payload while reading {what}")]
    Truncated { what: String },
    #[error("shape table inconsistent for {name}: file {file:?} vs model {model:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("tensor {name} not present in the rebuilt model")]
    UnknownTensor { name: String },
    #[error("model parameter {name} missing from the file")]
    MissingTensor { name: String },
    #[error("malformed trailer: {0}")]
    Trailer(#[from] serde_json::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("malformed vocabulary: {0}")]
    Vocab(String),
    #[error("malformed rng state: {0}")]
    Rng(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Trailer {
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    rng_seed: String,
    rng_word_pos: u128,
    vocab: Vec<String>,
}

/// Everything stored alongside the parameters.
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub vocab: Vocabulary,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    train_config: &TrainConfig,
    step: u64,
    rng: &ChaCha8Rng,
    vocab: &Vocabulary,
) -> Result<(), CheckpointError> {
    let params = model.named_params();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let shape = tensor.shape();
        buf.push(shape.len() as u8);
        for dim in &shape {
            buf.extend_from_slice(&(*dim as u64).to_le_bytes());
        }
        tensor.with_data(|data| {
            for v in data {
                let f = crate::scalar::to_f64(*v) as f32;
                buf.extend_from_slice(&f.to_le_bytes());
            }
        });
    }
    let trailer = Trailer {
        model_config: model.config().clone(),
        train_config: train_config.clone(),
        step,
        rng_seed: hex_encode(&rng.get_seed()),
        rng_word_pos: rng.get_word_pos(),
        vocab: vocab.tokens().to_vec(),
    };
    let trailer_json = serde_json::to_vec(&trailer)?;
    buf.extend_from_slice(&trailer_json);
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { what: what.into() });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16_le(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64_le(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, Checkpoint), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32_le("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let count = cur.u32_le("tensor count")? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16_le("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated {
                what: "utf-8 name".into(),
            })?;
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64_le("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4, &format!("payload of {name}"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    let trailer: Trailer = serde_json::from_slice(&bytes[cur.pos..])?;

    let model: Model<T> = Model::from_config(&trailer.model_config)?;
    let params = model.named_params();
    let by_name: std::collections::BTreeMap<&str, &crate::tensor::Tensor<T>> =
        params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut seen = std::collections::BTreeSet::new();
    for (name, shape, data) in &tensors {
        let tensor = by_name
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::UnknownTensor { name: name.clone() })?;
        if tensor.shape() != *shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                file: shape.clone(),
                model: tensor.shape(),
            });
        }
        let converted: Vec<T> = data.iter().map(|&f| cast::<T>(f as f64)).collect();
        tensor
            .copy_from_slice(&converted)
            .expect("shape checked above");
        seen.insert(name.clone());
    }
    if let Some((name, _)) = params.iter().find(|(n, _)| !seen.contains(n)) {
        return Err(CheckpointError::MissingTensor { name: name.clone() });
    }

    let seed: [u8; 32] = hex_decode(&trailer.rng_seed)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| CheckpointError::Rng("seed must be 32 hex-encoded bytes".into()))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_word_pos(trailer.rng_word_pos);
    let mut vocab = Vocabulary::from_tokens(trailer.vocab).map_err(CheckpointError::Vocab)?;
    vocab.rebuild_index();
    Ok((
        model,
        Checkpoint {
            model_config: trailer.model_config,
            train_config: trailer.train_config,
            step: trailer.step,
            rng,
            vocab,
        },
    ))
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}
