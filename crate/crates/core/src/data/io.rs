//! `SCDS` dataset container.
//!
//! ```text
//! "SCDS" | u32 version | u32 count | count × sample
//! sample = u16 S | S·S f32 image | S·S u8 mask | u64 seed | u8 kind
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Mask, ObjectKind, Sample};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"SCDS";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    decode(&mut BufReader::new(File::open(path)?))
}

pub(crate) fn encode(w: &mut impl Write, samples: &[Sample]) -> Result<()> {
    let count = u32::try_from(samples.len()).map_err(|_| Error::invalid("too many samples"))?;
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for s in samples {
        let size = u16::try_from(s.size).map_err(|_| Error::invalid(format!("image size {} too large", s.size)))?;
        w.write_all(&size.to_le_bytes())?;
        for v in &s.image {
            w.write_all(&v.to_le_bytes())?;
        }
        let mask: Vec<u8> = s.mask.bits().iter().map(|&b| b as u8).collect();
        w.write_all(&mask)?;
        w.write_all(&s.seed.to_le_bytes())?;
        w.write_all(&[s.kind.tag()])?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("file truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn decode(r: &mut impl Read) -> Result<Vec<Sample>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: DATASET_MAGIC });
    }
    let version = read_u32(r, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version { found: version, supported: DATASET_VERSION });
    }
    let count = read_u32(r, "sample count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let what = format!("sample {i}");
        let mut b2 = [0u8; 2];
        read_exact(r, &mut b2, &what)?;
        let size = u16::from_le_bytes(b2) as usize;
        if size == 0 {
            return Err(Error::Corrupt(format!("sample {i} has zero size")));
        }
        let n = size * size;
        let mut raw = vec![0u8; n * 4];
        read_exact(r, &mut raw, &what)?;
        let image: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut mask = vec![0u8; n];
        read_exact(r, &mut mask, &what)?;
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Corrupt(format!("sample {i} mask holds values other than 0/1")));
        }
        let mut b8 = [0u8; 8];
        read_exact(r, &mut b8, &what)?;
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag, &what)?;
        let kind = ObjectKind::from_tag(tag[0])
            .ok_or_else(|| Error::Corrupt(format!("sample {i} has unknown kind tag {}", tag[0])))?;
        samples.push(Sample {
            size,
            image,
            mask: Mask::from_bits(size, mask.iter().map(|&m| m == 1).collect())?,
            seed: u64::from_le_bytes(b8),
            kind,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Corrupt("trailing bytes after last sample".into()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};

    fn bytes(samples: &[Sample]) -> Vec<u8> {
        let mut buf = Vec::new();
        encode(&mut buf, samples).unwrap();
        buf
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ds = generate_dataset(100, 4, &SynthConfig::default()).unwrap();
        let back = decode(&mut bytes(&ds).as_slice()).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in ds.iter().zip(&back) {
            assert!(a.image.iter().zip(&b.image).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.mask, b.mask);
            assert_eq!((a.seed, a.kind, a.size), (b.seed, b.kind, b.size));
        }
    }

    #[test]
    fn truncation_is_reported() {
        let ds = generate_dataset(2, 4, &SynthConfig::default()).unwrap();
        let buf = bytes(&ds);
        let err = decode(&mut &buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
    }

    #[test]
    fn wrong_magic_is_named() {
        let mut buf = bytes(&[]);
        buf[..4].copy_from_slice(b"NOPE");
        let err = decode(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("NOPE"), "{err}");
    }

    #[test]
    fn future_version_rejected() {
        let mut buf = bytes(&[]);
        buf[4] = 2;
        assert!(matches!(decode(&mut buf.as_slice()), Err(Error::Version { found: 2, .. })));
    }
}
