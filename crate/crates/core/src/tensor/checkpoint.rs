//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DAQNCKPT"
//! version      u32      currently 1
//! meta count   u32
//!   per entry: key len u32, key bytes, value len u32, value bytes (UTF-8)
//! tensor count u32
//!   per entry: name len u32, name bytes, rank u32, dims (u64 × rank)
//! digest       32 bytes  SHA-256 of the payload block
//! payload      f64 little-endian values of every tensor, in declared order
//! ```
//!
//! The digest is verified on load, so silent corruption (truncation, bit
//! flips, concatenated garbage) is always reported rather than parsed.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DAQNCKPT";
const VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes metadata plus named tensors to `path`, atomically (write to a
/// sibling temp file, then rename).
pub fn save_container(
    path: &Path,
    meta: &[(String, String)],
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    for (_, t) in tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&payload);

    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in meta {
        out.extend_from_slice(&(k.len() as u32).to_le_bytes());
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        out.extend_from_slice(v.as_bytes());
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    out.extend_from_slice(&digest);
    out.extend_from_slice(&payload);

    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(err(format!(
                "truncated file: wanted {n} bytes at offset {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| err("non-UTF-8 string field"))
    }
}

/// Reads a container written by [`save_container`], verifying the digest.
#[allow(clippy::type_complexity)]
pub fn load_container(path: &Path) -> Result<(Vec<(String, String)>, Vec<(String, Tensor)>)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(8)? != MAGIC {
        return Err(err("bad magic: not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }

    let meta_count = r.u32()? as usize;
    let mut meta = Vec::with_capacity(meta_count);
    for _ in 0..meta_count {
        let k = r.string()?;
        let v = r.string()?;
        meta.push((k, v));
    }

    let tensor_count = r.u32()? as usize;
    let mut headers = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        headers.push((name, dims));
    }

    let stored_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let payload = &buf[r.pos..];
    let actual: [u8; 32] = Sha256::digest(payload).into();
    if actual != stored_digest {
        return Err(err("payload digest mismatch: file is corrupt"));
    }

    let mut tensors = Vec::with_capacity(tensor_count);
    let mut offset = 0usize;
    for (name, dims) in headers {
        let n: usize = dims.iter().product();
        let bytes = n * 8;
        if offset + bytes > payload.len() {
            return Err(err(format!(
                "payload too short for tensor {name:?} ({n} values)"
            )));
        }
        let mut data = Vec::with_capacity(n);
        for c in payload[offset..offset + bytes].chunks_exact(8) {
            data.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
        offset += bytes;
        tensors.push((name, Tensor::new(dims, data)?));
    }
    if offset != payload.len() {
        return Err(err("trailing bytes after declared tensors"));
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> (Vec<(String, String)>, Tensor, Tensor) {
        let meta = vec![
            ("architecture".into(), "daqn".into()),
            ("note".into(), "unit test".into()),
        ];
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f64::MIN_POSITIVE, 7.25])
            .unwrap();
        let b = Tensor::from_vec(vec![0.1, 0.2]);
        (meta, a, b)
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let (meta, a, b) = sample();
        save_container(&path, &meta, &[("layer.w", &a), ("layer.b", &b)]).unwrap();
        let (meta2, tensors) = load_container(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "layer.w");
        assert_eq!(tensors[0].1.shape(), &[2, 3]);
        assert_eq!(tensors[0].1.data(), a.data());
        assert_eq!(tensors[1].1.data(), b.data());
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let dir = tempdir().unwrap();
        let (meta, a, b) = sample();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_container(&p1, &meta, &[("w", &a), ("b", &b)]).unwrap();
        save_container(&p2, &meta, &[("w", &a), ("b", &b)]).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let (meta, a, b) = sample();
        save_container(&path, &meta, &[("w", &a), ("b", &b)]).unwrap();

        // Flip one payload byte.
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let e = load_container(&path).unwrap_err();
        assert!(matches!(e, Error::Checkpoint(_)), "{e}");

        // Truncate.
        save_container(&path, &meta, &[("w", &a), ("b", &b)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_container(&path).is_err());

        // Wrong magic.
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxx").unwrap();
        let e = load_container(&path).unwrap_err();
        assert!(format!("{e}").contains("magic"));
    }
}
