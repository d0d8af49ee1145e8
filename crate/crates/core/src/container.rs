//! The `IALT` named-tensor container used for checkpoints and datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IALT" | version: u32 | entry count: u32
//! per entry: name length: u16 | UTF-8 name | dtype: u8 (0 = f32, 1 = f64)
//!            | rank: u8 | dims: u64 × rank | row-major IEEE-754 payload
//! CRC32 (IEEE) of every preceding byte: u32
//! ```
//!
//! Entries are written in name order, so equal maps encode to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"IALT";
pub const VERSION: u32 = 1;

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn encode(map: &TensorMap) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(map.len()).map_err(|_| Error::InvalidDimension("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in map {
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidDimension(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::InvalidDimension(format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F32 => t.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            DType::F64 => t.data().iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            io::Error::new(ErrorKind::UnexpectedEof, format!("container truncated at byte {}", self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a container. Either the whole map is returned or an error; a
/// partially read map is never exposed.
pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::FormatVersionMismatch("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::FormatVersionMismatch(format!("version {version}, expected {VERSION}")));
    }
    let count = r.u32()?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| io::Error::new(ErrorKind::InvalidData, "entry name is not UTF-8"))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::FormatVersionMismatch(format!("unknown dtype code {code}")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| io::Error::new(ErrorKind::InvalidData, "dim overflow"))?;
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| io::Error::new(ErrorKind::InvalidData, "element count overflow"))?;
        let width = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let bytes_needed = n
            .checked_mul(width)
            .ok_or_else(|| io::Error::new(ErrorKind::InvalidData, "payload size overflow"))?;
        let payload = r.take(bytes_needed)?;
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        let t = Tensor::with_dtype(shape, data, dtype)?;
        if map.insert(name.clone(), t).is_some() {
            return Err(io::Error::new(ErrorKind::InvalidData, format!("duplicate entry {name}")).into());
        }
    }
    let body_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(io::Error::new(ErrorKind::InvalidData, "trailing bytes after checksum").into());
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(map)
}

pub fn save(path: impl AsRef<Path>, map: &TensorMap) -> Result<()> {
    fs::write(path, encode(map)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TensorMap> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("b.weights".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.1, 1e-300, -0.0]).unwrap());
        m.insert("a.bias".into(), Tensor::with_dtype(vec![3], vec![0.1, 0.2, 0.3], DType::F32).unwrap());
        m.insert("scalar".into(), Tensor::scalar(7.0).unwrap());
        m
    }

    #[test]
    fn layout_of_a_single_entry() {
        let mut m = TensorMap::new();
        m.insert("x".into(), Tensor::with_dtype(vec![1], vec![1.0], DType::F32).unwrap());
        let b = encode(&m).unwrap();
        let mut want = b"IALT".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'x');
        want.push(0);
        want.push(1);
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        for (k, v) in &m {
            let w = &back[k];
            assert_eq!(v.shape(), w.shape());
            assert_eq!(v.dtype(), w.dtype());
            for (a, b) in v.data().iter().zip(w.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::FormatVersionMismatch(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::FormatVersionMismatch(_))));
        let mut bad = bytes.clone();
        let last_payload = bytes.len() - 5;
        bad[last_payload] ^= 0x10;
        assert!(matches!(decode(&bad), Err(Error::ChecksumMismatch { .. })));
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Io(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Io(_))));
    }
}
