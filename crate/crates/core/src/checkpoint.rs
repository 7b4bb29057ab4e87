//! `SFCK` checkpoint container.
//!
//! ```text
//! "SFCK" | u32 version | u32 L | L bytes canonical JSON header | u32 count
//! count × ( u16 name_len | name | u8 ndim | ndim × u32 dim | u32 crc32 | numel × f32 )
//! ```
//!
//! Little-endian throughout. Tensors are stored sorted by name and each
//! carries the CRC-32 of its data bytes. The header is
//! `{"model": ModelConfig, "variant": "..."}` with keys sorted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderVariant, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub variant: DecoderVariant,
}

impl CheckpointHeader {
    /// Key-sorted compact JSON.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_value(self)?.to_string())
    }
}

/// Parsed file before any architecture checks. `corrupt` lists tensors
/// whose stored CRC does not match their bytes.
#[derive(Clone, Debug)]
pub struct RawCheckpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub corrupt: Vec<String>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(&mut w, model)?;
    w.flush()?;
    Ok(())
}

/// Loads and validates a checkpoint: CRCs must match and the tensor set
/// must be exactly the one its variant defines.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let raw = read_raw(path)?;
    if let Some(name) = raw.corrupt.first() {
        return Err(Error::Checksum(name.clone()));
    }
    Model::from_parts(raw.header.model, raw.header.variant, raw.params)
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawCheckpoint> {
    decode(&mut BufReader::new(File::open(path)?))
}

pub fn encode(w: &mut impl Write, model: &Model) -> Result<()> {
    let header = CheckpointHeader { model: model.config.clone(), variant: model.variant };
    let json = header.canonical_json()?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name `{name}` too long")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.ndim() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&crc32fast::hash(&bytes).to_le_bytes())?;
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    take_into(r, &mut b, what)?;
    Ok(b)
}

fn take_into(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("file truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

const MAX_HEADER: u32 = 1 << 20;
const MAX_NUMEL: usize = 1 << 28;

pub fn decode(r: &mut impl Read) -> Result<RawCheckpoint> {
    let magic = take::<4>(r, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: CHECKPOINT_MAGIC });
    }
    let version = u32::from_le_bytes(take(r, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, supported: CHECKPOINT_VERSION });
    }
    let len = u32::from_le_bytes(take(r, "header length")?);
    if len > MAX_HEADER {
        return Err(Error::Corrupt(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    take_into(r, &mut json, "header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;

    let count = u32::from_le_bytes(take(r, "tensor count")?);
    let mut params = ParamStore::new();
    let mut corrupt = Vec::new();
    let mut prev: Option<String> = None;
    for i in 0..count {
        let what = format!("tensor {i}");
        let name_len = u16::from_le_bytes(take(r, &what)?) as usize;
        let mut name = vec![0u8; name_len];
        take_into(r, &mut name, &what)?;
        let name = String::from_utf8(name).map_err(|_| Error::Corrupt(format!("{what} has a non-UTF-8 name")))?;
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(Error::Corrupt(format!("tensor `{name}` out of order or duplicated")));
        }
        let ndim = take::<1>(r, &name)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(r, &name)?) as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).filter(|&n| n <= MAX_NUMEL);
        let numel = numel.ok_or_else(|| Error::Corrupt(format!("tensor `{name}` has implausible shape {shape:?}")))?;
        let crc = u32::from_le_bytes(take(r, &name)?);
        let mut bytes = vec![0u8; numel * 4];
        take_into(r, &mut bytes, &name)?;
        if crc32fast::hash(&bytes) != crc {
            corrupt.push(name.clone());
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor `{name}`: {e}")))?;
        params.insert(name.clone(), t);
        prev = Some(name);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes after last tensor".into()));
    }
    Ok(RawCheckpoint { header, params, corrupt })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let cfg = ModelConfig { image_size: 32, patch_size: 8, ..ModelConfig::tiny() };
        Model::init(cfg, DecoderVariant::SafeClick, 1).unwrap()
    }

    fn bytes(m: &Model) -> Vec<u8> {
        let mut v = Vec::new();
        encode(&mut v, m).unwrap();
        v
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = tiny();
        let raw = decode(&mut bytes(&m).as_slice()).unwrap();
        assert!(raw.corrupt.is_empty());
        assert!(raw.params.bit_eq(&m.params));
        assert_eq!(raw.header.model, m.config);
    }

    #[test]
    fn flipped_data_byte_is_flagged() {
        let mut b = bytes(&tiny());
        let n = b.len();
        b[n - 3] ^= 0x40;
        let raw = decode(&mut b.as_slice()).unwrap();
        assert_eq!(raw.corrupt.len(), 1);
    }

    #[test]
    fn header_is_key_sorted() {
        let b = bytes(&tiny());
        let len = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&b[12..12 + len]).unwrap();
        assert!(json.starts_with("{\"model\":{\"dim\":"), "{json}");
    }

    #[test]
    fn truncation_and_trailing_bytes_are_errors() {
        let b = bytes(&tiny());
        assert!(matches!(decode(&mut &b[..b.len() - 1]), Err(Error::Corrupt(_))));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode(&mut long.as_slice()), Err(Error::Corrupt(_))));
    }
}
