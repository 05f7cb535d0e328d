//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DDUN" | version u32 | base_channels u32 | input_size u32
//! | epoch u32 | seed u64 | flags u8 | payload_checksum u64 | tensor_count u32
//! | entries...
//! entry := name_len u16 | name utf-8 | rank u8 | extent u32 * rank
//!          | payload f32-le * product(extents)
//! ```
//!
//! The checksum is FNV-1a 64 over every payload byte in entry order, so a
//! flipped value is detected even when all shapes still line up. Round trips
//! are bit-exact for every f32 pattern including subnormals and NaNs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{DdunetConfig, DdunetModel, ModelVariant};

pub const MAGIC: [u8; 4] = *b"DDUN";
pub const VERSION: u32 = 1;

const FLAG_SKIP_FUSE: u8 = 0b01;
const FLAG_BASELINE: u8 = 0b10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub base_channels: u32,
    pub input_size: u32,
    pub epoch: u32,
    pub seed: u64,
    pub dmsc_skip_fuse: bool,
    pub variant: ModelVariant,
}

impl CheckpointMeta {
    pub fn model_config(&self) -> DdunetConfig {
        DdunetConfig {
            base_channels: self.base_channels as usize,
            input_size: self.input_size as usize,
            dmsc_skip_fuse: self.dmsc_skip_fuse,
            variant: self.variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn payload_checksum(entries: &[RawTensor]) -> u64 {
    let mut h = FNV_OFFSET;
    for e in entries {
        for v in &e.data {
            h = fnv1a(h, &v.to_bits().to_le_bytes());
        }
    }
    h
}

pub fn write_checkpoint(path: &Path, meta: &CheckpointMeta, entries: &[RawTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(&MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta.base_channels.to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta.input_size.to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta.epoch.to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta.seed.to_le_bytes()).map_err(io_err)?;
    let mut flags = 0u8;
    if meta.dmsc_skip_fuse {
        flags |= FLAG_SKIP_FUSE;
    }
    if meta.variant == ModelVariant::Baseline {
        flags |= FLAG_BASELINE;
    }
    w.write_all(&[flags]).map_err(io_err)?;
    w.write_all(&payload_checksum(entries).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())
        .map_err(io_err)?;

    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&[e.shape.len() as u8]).map_err(io_err)?;
        for &d in &e.shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for v in &e.data {
            w.write_all(&v.to_bits().to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Checkpoint(CheckpointError::Truncated)
            } else {
                Error::io("<checkpoint>", e)
            }
        })?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<RawTensor>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };

    let magic: [u8; 4] = r.bytes()?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic }.into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let base_channels = r.u32()?;
    let input_size = r.u32()?;
    let epoch = r.u32()?;
    let seed = r.u64()?;
    let flags = r.u8()?;
    let stored_checksum = r.u64()?;
    let tensor_count = r.u32()?;

    let mut entries = Vec::with_capacity(tensor_count as usize);
    for _ in 0..tensor_count {
        let name_len = r.u16()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.inner.read_exact(&mut name_buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Checkpoint(CheckpointError::Truncated)
            } else {
                Error::io(path, e)
            }
        })?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::data("checkpoint tensor name is not valid UTF-8"))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f32::from_bits(u32::from_le_bytes(r.bytes()?)));
        }
        entries.push(RawTensor { name, shape, data });
    }

    let computed = payload_checksum(&entries);
    if computed != stored_checksum {
        return Err(CheckpointError::ChecksumMismatch {
            stored: stored_checksum,
            computed,
        }
        .into());
    }

    Ok((
        CheckpointMeta {
            base_channels,
            input_size,
            epoch,
            seed,
            dmsc_skip_fuse: flags & FLAG_SKIP_FUSE != 0,
            variant: if flags & FLAG_BASELINE != 0 {
                ModelVariant::Baseline
            } else {
                ModelVariant::Full
            },
        },
        entries,
    ))
}

/// Serialize every model tensor (parameters and running statistics).
pub fn save_model(
    model: &DdunetModel<f32>,
    path: &Path,
    epoch: u32,
    seed: u64,
) -> Result<()> {
    let config = model.config();
    let meta = CheckpointMeta {
        base_channels: config.base_channels as u32,
        input_size: config.input_size as u32,
        epoch,
        seed,
        dmsc_skip_fuse: config.dmsc_skip_fuse,
        variant: config.variant,
    };
    let store = model.param_store();
    let entries: Vec<RawTensor> = store
        .entries()
        .iter()
        .map(|e| RawTensor {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            data: e.tensor.to_vec(),
        })
        .collect();
    write_checkpoint(path, &meta, &entries)
}

/// Copy checkpoint tensors into an existing model, validating the entry
/// order, names and shapes against the model's store.
pub fn load_into_model(path: &Path, model: &DdunetModel<f32>) -> Result<CheckpointMeta> {
    let (meta, entries) = read_checkpoint(path)?;
    let store = model.param_store();
    if entries.len() != store.len() {
        return Err(CheckpointError::EntryCount {
            expected: store.len(),
            found: entries.len(),
        }
        .into());
    }
    for (i, (raw, slot)) in entries.iter().zip(store.entries()).enumerate() {
        if raw.name != slot.name {
            return Err(CheckpointError::NameMismatch {
                index: i,
                expected: slot.name.clone(),
                found: raw.name.clone(),
            }
            .into());
        }
        if raw.shape != slot.tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: raw.name.clone(),
                expected: slot.tensor.shape().to_vec(),
                found: raw.shape.clone(),
            }
            .into());
        }
    }
    for (raw, slot) in entries.iter().zip(store.entries()) {
        slot.tensor.set_data(&raw.data)?;
    }
    Ok(meta)
}

/// Rebuild a model from the checkpoint's own metadata.
pub fn load_model(path: &Path) -> Result<(DdunetModel<f32>, CheckpointMeta)> {
    let (meta, _) = read_checkpoint(path)?;
    let model = DdunetModel::new(meta.model_config(), meta.seed)?;
    let meta = load_into_model(path, &model)?;
    Ok((model, meta))
}
