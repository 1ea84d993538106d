//! On-disk formats.
//!
//! Tensor container ("TNSR"): magic bytes `TNSR`, little-endian u32 rank,
//! rank u32 dims, then row-major little-endian f64 values. Model bundles are
//! repeated records of (u32 name length, UTF-8 name, embedded TNSR blob).
//! PGM (binary P5) export is provided for eyeballing images; TNSR stays the
//! precision-bearing format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated TNSR header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("unreasonable rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated TNSR data: {e}")))?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated u32: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + t.len() * 8);
    encode_tensor(t, &mut bytes);
    let mut f = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    f.write_all(&bytes).map_err(|e| io_err(path, e))?;
    f.flush().map_err(|e| io_err(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut f = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let t = decode_tensor(&mut f)?;
    let mut rest = [0u8; 1];
    match f.read(&mut rest) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::Format("trailing bytes after TNSR payload".into())),
        Err(e) => Err(io_err(path, e)),
    }
}

/// Writes named tensors as a model bundle. Entries are written in map order,
/// so bundles are byte-stable.
pub fn write_bundle(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        f.write_all(&(name_bytes.len() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        f.write_all(name_bytes).map_err(|e| io_err(path, e))?;
        let mut blob = Vec::new();
        encode_tensor(t, &mut blob);
        f.write_all(&blob).map_err(|e| io_err(path, e))?;
    }
    f.flush().map_err(|e| io_err(path, e))
}

pub fn read_bundle(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut f = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut out = BTreeMap::new();
    loop {
        let mut len_buf = [0u8; 4];
        match f.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io_err(path, e)),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name).map_err(|e| io_err(path, e))?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Format(format!("non-UTF-8 name: {e}")))?;
        let t = decode_tensor(&mut f)?;
        out.insert(name, t);
    }
    Ok(out)
}

/// 8-bit binary PGM (P5), values clamped from [0, 1].
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = image.dims2()?;
    let mut f = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write!(f, "P5\n{w} {h}\n255\n").map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes).map_err(|e| io_err(path, e))?;
    f.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-9, 7.0]).unwrap();
        write_tensor(&path, &t).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 16 + 6 * 8);

        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bundle");
        let mut b = BTreeMap::new();
        b.insert("w".to_string(), Tensor::identity(3));
        b.insert("bias".to_string(), Tensor::zeros(&[3]));
        write_bundle(&path, &b).unwrap();
        assert_eq!(read_bundle(&path).unwrap(), b);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tnsr");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_tensor(&path).is_err());
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Tensor::full(&[4, 6], 0.5);
        write_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(bytes.len(), b"P5\n6 4\n255\n".len() + 24);
    }
}
