//! `TLWT` weight files: magic, `u16` version, then one record per tensor
//! (`u16` name length, UTF-8 name, `u8` rank, `u32` dims, `f32` payload),
//! all little-endian, until end of file.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TLWT";
pub const VERSION: u16 = 1;

pub fn encode<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid("tensor rank exceeds 255"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("TLWT", format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("TLWT", "bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format("TLWT", format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::format("TLWT", e.to_string()))?
            .to_owned();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let payload = r.take(count * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn save(path: &Path, params: &ParamStore<f32>) -> Result<()> {
    let bytes = encode(params.named())?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode([("w", &t)]).unwrap();
        assert_eq!(&bytes[..4], b"TLWT");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..8], &1u16.to_le_bytes());
        assert_eq!(bytes[8], b'w');
        assert_eq!(bytes[9], 1);
        assert_eq!(&bytes[10..14], &2u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn round_trip_and_truncation() {
        let a = Tensor::from_fn([2, 3, 1], |i| i as f32 * 0.5 - 1.0);
        let b = Tensor::scalar(7.25f32);
        let bytes = encode([("enc.0.weight", &a), ("bias", &b)]).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, vec![("enc.0.weight".to_string(), a), ("bias".to_string(), b)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOPE\x01\x00").is_err());
    }
}
