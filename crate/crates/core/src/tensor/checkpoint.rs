//! Portable tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "LAKT"
//! version  u32      currently 1
//! records  until end of file:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, extents (rank x u64)
//!   values   prod(extents) x f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LAKT";
pub const VERSION: u32 = 1;

/// A named tensor inside a container.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn encode(records: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for rec in records {
        let name = rec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(rec.tensor.rank() as u32).to_le_bytes());
        for &e in rec.tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in rec.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated {what} at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected LAKT".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("extents of `{name}` overflow")))?;
        let raw = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Format("value count overflow".into()))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(records)
}

pub fn save(path: impl AsRef<Path>, records: &[NamedTensor]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(records))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"NOPE\x01\0\0\0").is_err());
        let rec = NamedTensor {
            name: "w".into(),
            tensor: Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
        };
        let bytes = encode(&[rec]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn header_is_magic_then_version() {
        let bytes = encode(&[]);
        assert_eq!(&bytes[..4], b"LAKT");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            raw in prop::collection::vec(
                ("[a-z._0-9]{0,12}", prop::collection::vec(1usize..4, 0..4), any::<u32>()),
                0..5,
            )
        ) {
            let records: Vec<NamedTensor> = raw
                .into_iter()
                .map(|(name, shape, seed)| {
                    let tensor = Tensor::from_fn(shape, |i| {
                        f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919))
                    });
                    NamedTensor { name, tensor }
                })
                .collect();
            let bytes = encode(&records);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in records.iter().zip(&back) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.tensor.shape(), b.tensor.shape());
                let bits_a: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
