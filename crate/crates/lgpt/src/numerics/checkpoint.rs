//! Named-tensor checkpoint files.
//!
//! Layout: magic `LGPTCKPT`, format version u32, tensor count u32, then per
//! tensor: name length u16 + UTF-8 name, rank u8, extents as u64
//! little-endian, values as little-endian f32. Training math is f64; the
//! 32-bit narrowing applies to storage only.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LGPTCKPT";
pub const VERSION: u32 = 1;

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {}", name)));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        if t.rank() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("rank too large for '{}'", name)));
        }
        w.write_all(&[t.rank() as u8])?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {:?}: expected {:?}",
            path,
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch in {:?}: file has {}, expected {}",
            path, version, VERSION
        )));
    }
    let count = read_u32(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Checkpoint(format!("bad tensor name: {}", e)))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.w".to_string(),
            Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 3.0]).unwrap(),
        );
        tensors.insert("b".to_string(), Tensor::scalar(42.0));
        save(&path, &tensors).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded["a.w"].shape(), &[2, 2]);
        // The chosen values are exactly representable in f32.
        assert_eq!(loaded["a.w"].data(), tensors["a.w"].data());
        assert_eq!(loaded["b"].data()[0], 42.0);
    }

    #[test]
    fn header_fields_match_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        let tensors = BTreeMap::from([("x".to_string(), Tensor::from_vec(vec![1.0, 2.0, 3.0]))]);
        save(&path, &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..8], b"LGPTCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[16..18].try_into().unwrap()), 1);
        assert_eq!(bytes[18], b'x');
        assert_eq!(bytes[19], 1); // rank
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
