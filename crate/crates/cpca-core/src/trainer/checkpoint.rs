//! Versioned binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    4 bytes  "CPCA"
//! version  u32
//! digest   u64      config digest, checked on load
//! iter     u64      phase iteration counter
//! count    u32      number of named tensors
//! tensor   repeated: name_len u32, name bytes, rank u32, dims u64...,
//!                    data f64 (IEEE-754 double) ...
//! ```
//!
//! Architecture, model weights, prototype bank and optimizer momentum
//! buffers all travel as named tensors, so the container format has no
//! other record types.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ArchConfig, ModelParams, Nonlinearity};
use crate::proto::PrototypeBank;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPCA";
pub const FORMAT_VERSION: u32 = 1;

/// FNV-1a over a canonical config string; checkpoints refuse to load under
/// a different configuration.
pub fn config_digest(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Everything the training loop needs to continue from an iteration.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub bank: Option<PrototypeBank>,
    pub velocities: BTreeMap<String, Tensor>,
    pub iteration: u64,
}

impl TrainState {
    pub fn fresh(params: ModelParams) -> Self {
        TrainState {
            params,
            bank: None,
            velocities: BTreeMap::new(),
            iteration: 0,
        }
    }
}

fn named_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let arch = &state.params.arch;
    let mut out: Vec<(String, Tensor)> = Vec::new();
    out.push((
        "arch.meta".to_string(),
        Tensor::new(
            vec![8],
            vec![
                arch.in_channels as f64,
                arch.feature_dim as f64,
                arch.output_stride as f64,
                arch.num_classes as f64,
                match arch.nonlinearity {
                    Nonlinearity::Relu => 0.0,
                    Nonlinearity::Tanh => 1.0,
                },
                if arch.group_norm { 1.0 } else { 0.0 },
                (arch.seed >> 32) as f64,
                (arch.seed & 0xffff_ffff) as f64,
            ],
        ),
    ));
    out.push((
        "arch.widths".to_string(),
        Tensor::new(
            vec![arch.widths.len()],
            arch.widths.iter().map(|&w| w as f64).collect(),
        ),
    ));
    for (name, tensor) in state.params.named_tensors() {
        out.push((format!("model.{name}"), tensor.clone()));
    }
    if let Some(bank) = &state.bank {
        out.push(("proto.prototypes".to_string(), bank.prototypes.clone()));
        out.push((
            "proto.valid".to_string(),
            Tensor::new(
                vec![bank.valid.len()],
                bank.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
            ),
        ));
        out.push((
            "proto.state".to_string(),
            Tensor::new(
                vec![4],
                vec![
                    bank.iteration as f64,
                    bank.total as f64,
                    bank.m0,
                    bank.alpha,
                ],
            ),
        ));
    }
    for (name, tensor) in &state.velocities {
        out.push((format!("opt.{name}"), tensor.clone()));
    }
    out
}

/// Serialize to bytes; stable field order makes identical states
/// byte-identical.
pub fn encode(state: &TrainState, digest: u64) -> Vec<u8> {
    let tensors = named_tensors(state);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&digest.to_le_bytes());
    out.extend_from_slice(&state.iteration.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, state: &TrainState, digest: u64) -> Result<()> {
    crate::data::write_atomic(path, &encode(state, digest))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], expected_digest: u64) -> std::result::Result<TrainState, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let digest = r.u64()?;
    if digest != expected_digest {
        return Err(CheckpointError::DigestMismatch {
            found: digest,
            expected: expected_digest,
        });
    }
    let iteration = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        if len > 1 << 30 {
            return Err(CheckpointError::Corrupt(format!("implausible size {len}")));
        }
        let raw = r.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    rebuild(tensors, iteration)
}

fn rebuild(
    mut tensors: BTreeMap<String, Tensor>,
    iteration: u64,
) -> std::result::Result<TrainState, CheckpointError> {
    let missing = |name: &str| CheckpointError::Corrupt(format!("missing tensor `{name}`"));
    let meta = tensors.remove("arch.meta").ok_or_else(|| missing("arch.meta"))?;
    if meta.len() != 8 {
        return Err(CheckpointError::Corrupt("arch.meta must have 8 entries".into()));
    }
    let widths_t = tensors.remove("arch.widths").ok_or_else(|| missing("arch.widths"))?;
    let arch = ArchConfig {
        in_channels: meta.data()[0] as usize,
        feature_dim: meta.data()[1] as usize,
        output_stride: meta.data()[2] as usize,
        num_classes: meta.data()[3] as usize,
        nonlinearity: if meta.data()[4] == 0.0 {
            Nonlinearity::Relu
        } else {
            Nonlinearity::Tanh
        },
        group_norm: meta.data()[5] != 0.0,
        seed: ((meta.data()[6] as u64) << 32) | (meta.data()[7] as u64),
        widths: widths_t.data().iter().map(|&w| w as usize).collect(),
    };
    let mut params = crate::model::init_params(&arch)
        .map_err(|e| CheckpointError::Corrupt(format!("bad architecture: {e}")))?;
    for (name, tensor) in params.named_tensors_mut() {
        let stored = tensors
            .remove(&format!("model.{name}"))
            .ok_or_else(|| missing(&format!("model.{name}")))?;
        if stored.shape() != tensor.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `model.{name}`: shape {:?} does not match architecture {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        *tensor = stored;
    }

    let bank = match tensors.remove("proto.prototypes") {
        None => None,
        Some(prototypes) => {
            let valid_t = tensors.remove("proto.valid").ok_or_else(|| missing("proto.valid"))?;
            let state_t = tensors.remove("proto.state").ok_or_else(|| missing("proto.state"))?;
            if state_t.len() != 4 {
                return Err(CheckpointError::Corrupt("proto.state must have 4 entries".into()));
            }
            Some(PrototypeBank {
                prototypes,
                valid: valid_t.data().iter().map(|&v| v != 0.0).collect(),
                iteration: state_t.data()[0] as usize,
                total: state_t.data()[1] as usize,
                m0: state_t.data()[2],
                alpha: state_t.data()[3],
            })
        }
    };

    let mut velocities = BTreeMap::new();
    let keys: Vec<String> = tensors.keys().cloned().collect();
    for key in keys {
        if let Some(rest) = key.strip_prefix("opt.") {
            let t = tensors.remove(&key).unwrap();
            velocities.insert(rest.to_string(), t);
        }
    }
    if let Some(stray) = tensors.keys().next() {
        return Err(CheckpointError::Corrupt(format!("unknown tensor `{stray}`")));
    }
    Ok(TrainState {
        params,
        bank,
        velocities,
        iteration,
    })
}

pub fn load_checkpoint(path: &Path, expected_digest: u64) -> Result<TrainState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected_digest).map_err(Error::Checkpoint)
}
