//! Checkpoint container: `"LCKP"`, version byte, u32 little-endian header
//! length, a JSON header, then one f64 `.lvol` record per tensor in header
//! order.

use std::fs;
use std::path::Path;

use dgagan_core::models::ModelVariant;
use dgagan_core::nn::{Param, ParamStore};
use dgagan_core::optim::AdamState;
use dgagan_core::train::{TrainConfig, Trainer};
use dgagan_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{format, io, FormatError, Result};
use crate::lvol::{self, Raster, Samples};

pub const MAGIC: [u8; 4] = *b"LCKP";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub variant: ModelVariant,
    pub fold: usize,
    pub epochs_done: usize,
    pub config: TrainConfig,
    pub adam_g_step: u64,
    pub adam_d_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

const GENERATOR: &str = "generator";
const DISCRIMINATOR: &str = "discriminator";

fn groups(t: &Trainer) -> Vec<(String, Vec<(String, &Tensor)>)> {
    let m = &t.models;
    let names = |s: &ParamStore| s.iter().map(|p| p.name.clone()).collect::<Vec<_>>();
    let mut out: Vec<(String, Vec<(String, &Tensor)>)> = Vec::new();
    let gnames = names(&m.generator.params);
    out.push((GENERATOR.into(), m.generator.params.iter().map(|p| (p.name.clone(), &p.value)).collect()));
    out.push(("adam_g.m".into(), gnames.iter().cloned().zip(&m.adam_g.m).collect()));
    out.push(("adam_g.v".into(), gnames.iter().cloned().zip(&m.adam_g.v).collect()));
    if let (Some(d), Some(a)) = (&m.discriminator, &m.adam_d) {
        let dnames = names(&d.params);
        out.push((DISCRIMINATOR.into(), d.params.iter().map(|p| (p.name.clone(), &p.value)).collect()));
        out.push(("adam_d.m".into(), dnames.iter().cloned().zip(&a.m).collect()));
        out.push(("adam_d.v".into(), dnames.iter().cloned().zip(&a.v).collect()));
    }
    out
}

pub fn encode(t: &Trainer) -> std::result::Result<Vec<u8>, FormatError> {
    let groups = groups(t);
    let mut tensors = Vec::new();
    let mut body = Vec::new();
    for (group, items) in &groups {
        for (name, tensor) in items {
            tensors.push(TensorEntry {
                group: group.clone(),
                name: name.clone(),
                shape: tensor.shape().to_vec(),
            });
            body.extend(lvol::encode(&Raster {
                extents: [tensor.numel().max(1), 1, 1],
                samples: Samples::F64(tensor.data().to_vec()),
            })?);
        }
    }
    let header = Header {
        variant: t.variant(),
        fold: t.fold,
        epochs_done: t.epochs_done,
        config: t.config.clone(),
        adam_g_step: t.models.adam_g.t,
        adam_d_step: t.models.adam_d.as_ref().map(|a| a.t),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(9 + json.len() + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(Header, Vec<Tensor>), FormatError> {
    if bytes.len() < 9 {
        return Err(FormatError::Truncated {
            needed: 9,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    if bytes[4] != VERSION {
        return Err(FormatError::Version(bytes[4]));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("four bytes")) as usize;
    let end = 9 + len;
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[9..end]).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut rest = &bytes[end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let (raster, used) = lvol::decode_prefix(rest)?;
        rest = &rest[used..];
        let Samples::F64(data) = raster.samples else {
            return Err(FormatError::Dtype(lvol::DTYPE_F32));
        };
        let t = Tensor::new(&entry.shape, data)
            .map_err(|e| FormatError::Header(format!("tensor {}/{}: {e}", entry.group, entry.name)))?;
        tensors.push(t);
    }
    if !rest.is_empty() {
        return Err(FormatError::Trailing(rest.len()));
    }
    Ok((header, tensors))
}

pub fn save(path: &Path, t: &Trainer) -> Result<()> {
    let bytes = encode(t).map_err(format(path))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

fn take_group(header: &Header, tensors: &mut [Option<Tensor>], group: &str) -> Vec<Param> {
    header
        .tensors
        .iter()
        .zip(tensors.iter_mut())
        .filter(|(e, _)| e.group == group)
        .filter_map(|(e, t)| t.take().map(|value| Param { name: e.name.clone(), value }))
        .collect()
}

/// Rebuilds a trainer, parameters and optimizer state from `path`.
pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(io(path))?;
    let (header, tensors) = decode(&bytes).map_err(format(path))?;
    let mut trainer = Trainer::new(header.variant, header.config.clone(), header.fold)?;
    trainer.epochs_done = header.epochs_done;
    let mut slots: Vec<Option<Tensor>> = tensors.into_iter().map(Some).collect();
    let m = &mut trainer.models;
    m.generator.params.load(take_group(&header, &mut slots, GENERATOR))?;
    m.adam_g = restore_adam(&header, &mut slots, "adam_g", header.adam_g_step, &m.generator.params)?;
    if let Some(d) = m.discriminator.as_mut() {
        d.params.load(take_group(&header, &mut slots, DISCRIMINATOR))?;
        let step = header.adam_d_step.unwrap_or(0);
        m.adam_d = Some(restore_adam(&header, &mut slots, "adam_d", step, &d.params)?);
    }
    Ok(trainer)
}

fn restore_adam(
    header: &Header,
    slots: &mut [Option<Tensor>],
    prefix: &str,
    t: u64,
    params: &ParamStore,
) -> Result<AdamState> {
    let mut state = AdamState::new(params);
    for (part, dst) in [("m", &mut state.m), ("v", &mut state.v)] {
        let loaded = take_group(header, slots, &format!("{prefix}.{part}"));
        let mut scratch = params.clone();
        scratch.load(loaded)?;
        *dst = scratch.iter().map(|p| p.value.clone()).collect();
    }
    state.t = t;
    Ok(state)
}
