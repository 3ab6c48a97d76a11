//! Single-tensor binary file format (extension `.cdtf`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "CDTF" (0x43 0x44 0x54 0x46)
//! version u16      currently 1
//! dtype   u8       1 = f32
//! rank    u8
//! dims    rank x u32
//! data    product(dims) x f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const CDTF_MAGIC: [u8; 4] = *b"CDTF";
pub const CDTF_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    if tensor.rank() > u8::MAX as usize {
        return Err(Error::format(path, "rank exceeds u8"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(&CDTF_MAGIC).map_err(io_err)?;
    w.write_all(&CDTF_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&[DTYPE_F32, tensor.rank() as u8])
        .map_err(io_err)?;
    for &dim in tensor.shape() {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::format(path, format!("dimension {dim} exceeds u32")))?;
        w.write_all(&dim.to_le_bytes()).map_err(io_err)?;
    }
    for &v in tensor.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut header = [0u8; 8];
    read_exact(path, &mut r, &mut header)?;
    if header[0..4] != CDTF_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != CDTF_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    if header[6] != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype {}", header[6])));
    }
    let rank = header[7] as usize;
    if rank == 0 {
        return Err(Error::format(path, "rank must be positive"));
    }

    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        read_exact(path, &mut r, &mut dim)?;
        let dim = u32::from_le_bytes(dim) as usize;
        if dim == 0 {
            return Err(Error::format(path, "zero dimension"));
        }
        shape.push(dim);
    }

    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        read_exact(path, &mut r, &mut buf)?;
        data.push(f32::from_le_bytes(buf) as Real);
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format(path, "trailing bytes after tensor data")),
        Err(e) => return Err(Error::io(path, e)),
    }
    Tensor::new(shape, data)
}

fn read_exact(path: &Path, r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_shape_and_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cdtf");
        let t = Tensor::from_fn([2, 3, 4], |i| (i as Real) * 0.25 - 1.0);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn header_bytes_match_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cdtf");
        write_tensor(&path, &Tensor::scalar(1.0)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], &[0x43, 0x44, 0x54, 0x46]);
        assert_eq!(&bytes[4..6], &[1, 0]); // version 1, little-endian
        assert_eq!(bytes[6], 1); // dtype f32
        assert_eq!(bytes[7], 1); // rank
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 4);
    }

    #[test]
    fn rejects_corrupted_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cdtf");

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_tensor(&path).is_err());

        // Valid header followed by truncated data.
        let t = Tensor::from_fn([4], |i| i as Real);
        write_tensor(&path, &t).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_tensor(&path).is_err());
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.cdtf");
        write_tensor(&path, &Tensor::scalar(2.0)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_tensor(&path).is_err());
    }
}
