//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IDLW" | version: u16 | arch_id: u16 length + UTF-8 | count: u32
//! count × ( name: u16 length + UTF-8 | rank: u32 | rank × dim: u32 | f32 data )
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"IDLW";
pub const WEIGHT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub arch_id: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        put_str(&mut out, &self.arch_id)?;
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != WEIGHT_MAGIC {
            return Err(Error::WeightFormat("missing IDLW magic".into()));
        }
        let version = r.u16()?;
        if version != WEIGHT_VERSION {
            return Err(Error::WeightFormat(format!(
                "unsupported version {version} (expected {WEIGHT_VERSION})"
            )));
        }
        let arch_id = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::WeightFormat(format!("tensor {name:?} is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::WeightFormat("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { arch_id, tensors })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::WeightFormat(format!("string too long: {} bytes", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::WeightFormat(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::WeightFormat("string is not UTF-8".into()))
    }
}

pub fn write_weight_file(path: &Path, file: &WeightFile) -> Result<()> {
    fs::write(path, file.to_bytes()?)?;
    Ok(())
}

pub fn read_weight_file(path: &Path) -> Result<WeightFile> {
    WeightFile::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WeightFile {
        WeightFile {
            arch_id: "lenet".into(),
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap()),
                ("b".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"IDLW");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..8], &5u16.to_le_bytes());
        assert_eq!(&bytes[8..13], b"lenet");
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(WeightFile::from_bytes(&bytes[..cut]), Err(Error::WeightFormat(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = WeightFile::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("magic"));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(WeightFile::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in prop::collection::vec(any::<u32>(), 1..64), name in "[a-z.0-9]{1,12}") {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let n = data.len();
            let file = WeightFile { arch_id: "mlp".into(), tensors: vec![(name, Tensor::new(&[n], data).unwrap())] };
            let back = WeightFile::from_bytes(&file.to_bytes().unwrap()).unwrap();
            let before: Vec<u32> = file.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            let after: Vec<u32> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(before, after);
            prop_assert_eq!(&back.tensors[0].0, &file.tensors[0].0);
        }
    }
}
