//! `PAWM` model files: magic, `u16` version, `u32` entry count, then per
//! entry a `u32` name length, UTF-8 name, `u8` rank, `rank` x `u32` dims
//! and the `f32` little-endian payload.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PAWM";
const VERSION: u16 = 1;

/// Serializes parameter values (gradients are not stored). Values are
/// narrowed to `f32`.
pub fn write_model(params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u16::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(params.len() as u32).map_err(io)?;
    for (name, p) in params.iter() {
        let shape = p.value.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Validation(format!("{name}: rank {} too large", shape.len())));
        }
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u8(shape.len() as u8).map_err(io)?;
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Validation(format!("{name}: dim {d} too large")))?;
            w.write_u32::<LittleEndian>(d).map_err(io)?;
        }
        let narrowed: Vec<f32> = p.value.data().iter().map(|&v| v as f32).collect();
        let mut buf = vec![0u8; narrowed.len() * 4];
        LittleEndian::write_f32_into(&narrowed, &mut buf);
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(LittleEndian::read_u32(self.take(4)?) as usize)
    }
}

/// Reads a model file. Rank-1 tensors are excluded from LARS adaptation,
/// matching how freshly built stores are flagged.
pub fn read_model(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format(format!("{}: missing PAWM header", path.display())));
    }
    let version = LittleEndian::read_u16(cur.take(2)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let count = cur.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Format(format!("parameter name: {e}")))?
            .to_string();
        let rank = cur.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let mut vals = vec![0f32; n];
        LittleEndian::read_f32_into(raw, &mut vals);
        let value = Tensor::new(shape, vals.into_iter().map(f64::from).collect())?;
        let lars = value.rank() > 1;
        params.insert(name, value, lars)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last entry",
            bytes.len() - cur.pos
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_encoder, EncoderConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig::new(9, 32);
        let params = build_encoder(&cfg, 2).unwrap();
        let a = dir.path().join("a.pawm");
        let b = dir.path().join("b.pawm");
        write_model(&params, &a).unwrap();
        let back = read_model(&a).unwrap();
        write_model(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        // second load is exactly the first
        assert!(read_model(&b).unwrap().values_bit_identical(&back));
        for ((n1, p1), (n2, p2)) in params.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.value.shape(), p2.value.shape());
            assert_eq!(p1.lars_adapt, p2.lars_adapt);
        }
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        std::fs::write(&p, b"XXXX").unwrap();
        assert!(matches!(read_model(&p), Err(Error::Format(_))));
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros(&[3, 2]), true).unwrap();
        write_model(&params, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_model(&p), Err(Error::Truncated { .. })));
    }
}
