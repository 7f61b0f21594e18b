//! PXQK binary tensor files.
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `PXQK`                  |
//! | 4      | 4    | version, u32 LE, currently 1  |
//! | 8      | 4    | n_heads, u32 LE               |
//! | 12     | 4    | seq_len, u32 LE               |
//! | 16     | 4    | dim, u32 LE                   |
//! | 20     | 4·n  | f32 LE, `[head][token][dim]`  |
//!
//! A Q/K/V bundle is three records back to back, in that order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::HeadTensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"PXQK";
pub const TENSOR_VERSION: u32 = 1;

/// Reads past this many elements are refused before allocating.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_tensor<W: Write>(t: &HeadTensor, mut w: W) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    for v in [TENSOR_VERSION, t.n_heads() as u32, t.seq_len() as u32, t.dim() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record starting at stream offset `base` (used in error offsets).
/// Malformed headers are format errors; short reads surface as I/O errors
/// of kind `UnexpectedEof`.
pub fn read_tensor_at<R: Read>(mut r: R, base: u64) -> std::result::Result<HeadTensor, ReadError> {
    let mut header = [0u8; 20];
    r.read_exact(&mut header)?;
    if &header[..4] != TENSOR_MAGIC {
        return Err(ReadError::Format(Error::Format { offset: base, message: "bad magic, expected PXQK".into() }));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != TENSOR_VERSION {
        return Err(ReadError::Format(Error::Format {
            offset: base + 4,
            message: format!("unsupported version {version}"),
        }));
    }
    let (h, n, d) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let count = h as u64 * n as u64 * d as u64;
    if count == 0 || count > MAX_ELEMENTS {
        return Err(ReadError::Format(Error::Format {
            offset: base + 8,
            message: format!("implausible shape {h}x{n}x{d}"),
        }));
    }
    let mut bytes = vec![0u8; count as usize * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    HeadTensor::new(h, n, d, data).map_err(ReadError::Format)
}

/// Failure of a stream read before a path is attached.
#[derive(Debug)]
pub enum ReadError {
    Io(std::io::Error),
    Format(Error),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

impl ReadError {
    fn with_path(self, path: &Path) -> Error {
        match self {
            ReadError::Io(e) => Error::io(path, e),
            ReadError::Format(e) => e,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<HeadTensor> {
    let path = path.as_ref();
    read_tensor_at(open(path)?, 0).map_err(|e| e.with_path(path))
}

pub fn write_tensor_file(t: &HeadTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(t, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a Q, K, V bundle written by [`write_qkv_file`].
pub fn read_qkv_file(path: impl AsRef<Path>) -> Result<(HeadTensor, HeadTensor, HeadTensor)> {
    let path = path.as_ref();
    let mut r = open(path)?;
    let mut base = 0u64;
    let mut next = |r: &mut BufReader<File>| -> Result<HeadTensor> {
        let t = read_tensor_at(r, base).map_err(|e| e.with_path(path))?;
        base += 20 + 4 * t.data().len() as u64;
        Ok(t)
    };
    let q = next(&mut r)?;
    let k = next(&mut r)?;
    let v = next(&mut r)?;
    Ok((q, k, v))
}

pub fn write_qkv_file(q: &HeadTensor, k: &HeadTensor, v: &HeadTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    [q, k, v]
        .into_iter()
        .try_for_each(|t| write_tensor(t, &mut w))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
