//! Binary tensor container and multi-tensor checkpoint files.
//!
//! Container layout: magic `AANDTNS1`, rank (u32 LE), each dim (u32 LE),
//! then the row-major f32 LE payload.
//!
//! Multi-tensor file: record count (u32 LE), then per record a name length
//! (u32 LE), the UTF-8 name, and the absolute byte offset (u64 LE) of that
//! tensor's container; containers follow back to back. Records are written
//! in ascending name order so identical contents produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 8] = b"AANDTNS1";

fn fmt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn tensor_byte_len(t: &Tensor) -> usize {
    8 + 4 + 4 * t.rank() + 4 * t.len()
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| fmt_err(path, "truncated tensor container"))
}

pub fn read_tensor(r: &mut impl Read, path: &Path) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, path)?;
    if &magic != TENSOR_MAGIC {
        return Err(fmt_err(path, format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, path)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(fmt_err(path, format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        read_exact(r, &mut b4, path)?;
        dims.push(u32::from_le_bytes(b4) as usize);
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; n * 4];
    read_exact(r, &mut payload, path)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

/// Atomically write `bytes` to `path` via a temp file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(tensor_byte_len(t));
    write_tensor(&mut buf, t).expect("vec write");
    atomic_write(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let t = read_tensor(&mut cur, path)?;
    if !cur.is_empty() {
        return Err(fmt_err(path, "trailing bytes after tensor payload"));
    }
    Ok(t)
}

/// Serialize named tensors into the multi-tensor layout.
pub fn tensors_to_bytes(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut header_len = 4usize;
    for name in tensors.keys() {
        header_len += 4 + name.len() + 8;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = header_len as u64;
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += tensor_byte_len(t) as u64;
    }
    for t in tensors.values() {
        write_tensor(&mut buf, t).expect("vec write");
    }
    buf
}

pub fn tensors_from_bytes(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let take = |range: std::ops::Range<usize>| -> Result<&[u8]> {
        bytes
            .get(range)
            .ok_or_else(|| fmt_err(path, "truncated multi-tensor file"))
    };
    let count = u32::from_le_bytes(take(0..4)?.try_into().unwrap()) as usize;
    let mut pos = 4usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(pos..pos + 4)?.try_into().unwrap()) as usize;
        pos += 4;
        let name = std::str::from_utf8(take(pos..pos + nlen)?)
            .map_err(|_| fmt_err(path, "non-UTF-8 tensor name"))?
            .to_string();
        pos += nlen;
        let offset = u64::from_le_bytes(take(pos..pos + 8)?.try_into().unwrap()) as usize;
        pos += 8;
        records.push((name, offset));
    }
    let mut out = BTreeMap::new();
    for (name, offset) in records {
        if offset > bytes.len() {
            return Err(fmt_err(path, format!("offset {offset} beyond file end")));
        }
        let mut cur = &bytes[offset..];
        let t = read_tensor(&mut cur, path)?;
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    atomic_write(path, &tensors_to_bytes(tensors))
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    tensors_from_bytes(&bytes, path)
}

/// 8-bit PGM export, min-max normalized per image. The normalization
/// constants land in a `<path>.txt` sidecar.
pub fn save_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let dims = map.dims();
    if dims.len() != 2 {
        return Err(Error::InvalidArgument {
            context: format!("PGM export expects an HxW map, got {dims:?}"),
        });
    }
    let (h, w) = (dims[0], dims[1]);
    let lo = map.min_value();
    let hi = map.max_value();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map.data() {
        buf.push(((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    atomic_write(path, &buf)?;
    let sidecar = format!("min={lo}\nmax={hi}\n");
    let mut side_path = path.as_os_str().to_owned();
    side_path.push(".txt");
    atomic_write(Path::new(&side_path), sidecar.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tns");
        let t = gaussian(vec![3, 4, 5], 1.0, 42);
        save_tensor(&p, &t).unwrap();
        let back = load_tensor(&p).unwrap();
        assert_eq!(t, back);
        let b1 = fs::read(&p).unwrap();
        save_tensor(&p, &back).unwrap();
        assert_eq!(b1, fs::read(&p).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tns");
        let t = gaussian(vec![8], 1.0, 1);
        save_tensor(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tns");
        fs::write(&p, b"NOTMAGIC\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn multi_tensor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bundle.tns");
        let mut m = BTreeMap::new();
        m.insert("level0".to_string(), gaussian(vec![2, 4, 4], 1.0, 5));
        m.insert("level1".to_string(), gaussian(vec![4, 2, 2], 1.0, 6));
        m.insert("meta/epoch".to_string(), Tensor::scalar(3.0));
        save_tensors(&p, &m).unwrap();
        assert_eq!(load_tensors(&p).unwrap(), m);
    }

    #[test]
    fn pgm_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let map = Tensor::new(vec![2, 2], vec![0.0, 0.5, 1.0, 2.0]).unwrap();
        save_pgm(&p, &map).unwrap();
        let sidecar = fs::read_to_string(dir.path().join("m.pgm.txt")).unwrap();
        assert!(sidecar.contains("min=0") && sidecar.contains("max=2"));
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes[bytes.len() - 4..].to_vec(), vec![0u8, 64, 128, 255]);
    }
}
