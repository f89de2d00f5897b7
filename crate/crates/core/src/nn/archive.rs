//! Single-file checkpoint archive: named f32 tensors, named raw blobs and a
//! JSON metadata document, all little-endian and schema-versioned. Writing the
//! same archive twice is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DRGA";
pub const VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct Archive {
    pub tensors: BTreeMap<String, ArrayD<f32>>,
    pub blobs: BTreeMap<String, Vec<u8>>,
    pub meta: serde_json::Value,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Archive { tensors: BTreeMap::new(), blobs: BTreeMap::new(), meta }
    }

    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn blob(&self, name: &str) -> Result<&Vec<u8>> {
        self.blobs.get(name).ok_or_else(|| Error::Format(format!("missing blob {name}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_name(w, name)?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let data = t.as_standard_layout();
            for &v in data.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.blobs.len() as u32).to_le_bytes())?;
        for (name, b) in &self.blobs {
            write_name(w, name)?;
            w.write_all(&(b.len() as u64).to_le_bytes())?;
            w.write_all(b)?;
        }
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != MAGIC {
            return Err(Error::Format("bad archive magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let name = read_name(r)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            read_exact(r, &mut buf)?;
            let data: Vec<f32> =
                buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.insert(name, arr);
        }
        let mut blobs = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let name = read_name(r)?;
            let len = read_u64(r)? as usize;
            let mut buf = vec![0u8; len];
            read_exact(r, &mut buf)?;
            blobs.insert(name, buf);
        }
        let meta_len = read_u64(r)? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        read_exact(r, &mut meta_buf)?;
        let meta = serde_json::from_slice(&meta_buf)?;
        Ok(Archive { tensors, blobs, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_name(w: &mut impl Write, name: &str) -> std::io::Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format(format!("truncated archive: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    let len = u16::from_le_bytes(b) as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-utf8 name".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = Archive::new(serde_json::json!({"kind": "test", "step": 7}));
        a.tensors.insert(
            "w".into(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0f32, -2.5, 3.25, 0.1, f32::MIN_POSITIVE, 9.0])
                .unwrap(),
        );
        a.blobs.insert("bits".into(), vec![0xde, 0xad, 0xbe, 0xef]);
        let mut buf1 = Vec::new();
        a.write_to(&mut buf1).unwrap();
        let b = Archive::read_from(&mut buf1.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        b.write_to(&mut buf2).unwrap();
        assert_eq!(buf1, buf2, "two serializations differ");
        assert_eq!(b.tensor("w").unwrap(), a.tensor("w").unwrap());
        assert_eq!(b.blob("bits").unwrap(), a.blob("bits").unwrap());
        assert_eq!(b.meta["step"], 7);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        assert!(Archive::read_from(&mut bytes.as_slice()).is_err());
    }
}
