//! Flat binary parameter checkpoints.
//!
//! Layout: the magic bytes `VGCKPT1`, a u64 parameter count, then per
//! parameter: u64 name length, the UTF-8 name, u64 rank, the extents, and the
//! values. All integers are 64-bit little-endian; values are IEEE-754 f64
//! little-endian.

use super::{numel_of, Tensor};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"VGCKPT1";

pub fn save_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, tensor) in params {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        for &value in tensor.data() {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| Error::MalformedInput(format!("{}: truncated checkpoint header", path.display())))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::MalformedInput(format!(
            "{}: bad checkpoint magic {:?}",
            path.display(),
            magic
        )));
    }
    let count = read_u64(&mut r, path)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| truncated(path, "parameter name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::MalformedInput(format!("{}: non-UTF-8 parameter name", path.display())))?;
        let rank = read_u64(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel = numel_of(&shape);
        let mut buf = vec![0u8; numel * 8];
        r.read_exact(&mut buf).map_err(|_| truncated(path, "values"))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(params)
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| truncated(path, "integer field"))?;
    Ok(u64::from_le_bytes(buf))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::MalformedInput(format!("{}: truncated checkpoint ({what})", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_names_shapes_and_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = vec![
            (
                "block0.gcn.w".to_string(),
                Tensor::from_vec(&[2, 3], vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.5]).unwrap(),
            ),
            ("pool.w".to_string(), Tensor::from_vec(&[4], vec![1.0; 4]).unwrap()),
            ("scalar".to_string(), Tensor::scalar(42.0)),
        ];
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOTCKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::MalformedInput(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let params = vec![("w".to_string(), Tensor::from_vec(&[8], vec![0.5; 8]).unwrap())];
        save_checkpoint(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::MalformedInput(_))));
    }
}
