//! Model checkpoint archive: a config header plus named parameter tensors.
//!
//! Layout (all integers little-endian):
//!   magic "NCKPT1\n\0", u32 version,
//!   u64 header length + UTF-8 header bytes,
//!   u64 tensor count, then per tensor:
//!     u64 name length + name bytes, u64 rank, u64 dims..., f64 data...

use crate::error::{NumError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NCKPT1\n\0";
const VERSION: u32 = 1;

pub fn save(path: &Path, header: &str, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load(path: &Path) -> Result<(String, ParamSet)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumError::Checkpoint("bad magic".into()));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(NumError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let hlen = read_u64(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header = String::from_utf8(hbuf)
        .map_err(|_| NumError::Checkpoint("header is not UTF-8".into()))?;
    let count = read_u64(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = read_u64(&mut r)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf)
            .map_err(|_| NumError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        params.insert(&name, Tensor::new(shape, data)?);
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-12, 7.0]).unwrap());
        p.insert("b", Tensor::vector(vec![0.25]));
        save(&path, "variant=xgate\nlatent=20\n", &p).unwrap();
        let (header, q) = load(&path).unwrap();
        assert_eq!(header, "variant=xgate\nlatent=20\n");
        assert_eq!(q.get("w"), p.get("w"));
        assert_eq!(q.get("b"), p.get("b"));
        let names: Vec<&str> = q.names().collect();
        assert_eq!(names, vec!["w", "b"]);
    }

    #[test]
    fn rejects_garbage_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(NumError::Checkpoint(_)) | Err(NumError::Io(_))));
    }
}
