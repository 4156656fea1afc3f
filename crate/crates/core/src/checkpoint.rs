//! Versioned named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"WSIGCKPT"` magic, u32 format version, u8 element width (4 or 8),
//! u32 header length + UTF-8 JSON header, u32 tensor count, then per tensor:
//! u32 name length + name, u8 trainable flag, u32 ndim, u32 dims, and the
//! values as little-endian IEEE floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::tape::ParameterSet;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"WSIGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("element width {found} does not match requested precision {want}")]
    PrecisionMismatch { found: u8, want: u8 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn elem_width<S: Scalar>() -> u8 {
    S::ZERO.to_le_bytes_vec().len() as u8
}

pub fn save<S: Scalar>(path: &Path, header_json: &str, params: &ParameterSet<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[elem_width::<S>()])?;
    let hdr = header_json.as_bytes();
    w.write_all(&(hdr.len() as u32).to_le_bytes())?;
    w.write_all(hdr)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor, trainable) in params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[trainable as u8])?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes_vec())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load<S: Scalar>(path: &Path) -> Result<(String, ParameterSet<S>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut width = [0u8; 1];
    r.read_exact(&mut width)?;
    let want = elem_width::<S>();
    if width[0] != want {
        return Err(CheckpointError::PrecisionMismatch { found: width[0], want });
    }
    let hdr_len = read_u32(&mut r)? as usize;
    let mut hdr = vec![0u8; hdr_len];
    r.read_exact(&mut hdr)?;
    let header = String::from_utf8(hdr).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let count = read_u32(&mut r)? as usize;
    let mut params = ParameterSet::new();
    let mut trainables: Vec<(String, bool)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = vec![0u8; want as usize];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            let v = match want {
                4 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(buf[..8].try_into().unwrap()),
            };
            data.push(S::from_f64(v));
        }
        params.insert(&name, Tensor::new(shape, data));
        trainables.push((name, flag[0] != 0));
    }
    params.set_trainable(|n| {
        trainables
            .iter()
            .find(|(name, _)| name == n)
            .map_or(true, |(_, t)| *t)
    });
    Ok((header, params))
}

/// SHA-256 of a file, hex-encoded. Used to compare checkpoints for
/// bit-identical reproduction.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut f, &mut hasher)?;
    Ok(hex_string(&hasher.finalize()))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut params: ParameterSet<f32> = ParameterSet::new();
        params.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.25, 1e-7]));
        params.insert("a.b", Tensor::new(vec![2], vec![0.5, -0.5]));
        params.set_trainable(|n| n != "a.b");
        save(&path, r#"{"kind":"test"}"#, &params).unwrap();
        let (hdr, loaded) = load::<f32>(&path).unwrap();
        assert_eq!(hdr, r#"{"kind":"test"}"#);
        assert_eq!(loaded.get("a.w").unwrap(), params.get("a.w").unwrap());
        assert_eq!(loaded.get("a.b").unwrap(), params.get("a.b").unwrap());
        assert!(loaded.is_trainable("a.w"));
        assert!(!loaded.is_trainable("a.b"));
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut params: ParameterSet<f64> = ParameterSet::new();
        params.insert("x", Tensor::scalar(1.0));
        save(&path, "{}", &params).unwrap();
        assert!(matches!(
            load::<f32>(&path),
            Err(CheckpointError::PrecisionMismatch { found: 8, want: 4 })
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load::<f32>(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn identical_saves_hash_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let mut params: ParameterSet<f32> = ParameterSet::new();
        params.insert("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        save(&p1, "{}", &params).unwrap();
        save(&p2, "{}", &params).unwrap();
        assert_eq!(file_sha256(&p1).unwrap(), file_sha256(&p2).unwrap());
    }
}
