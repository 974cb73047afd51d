//! Little-endian binary containers.
//!
//! Tensor files (backbone checkpoints, PEL sidecars, feature banks):
//!
//! ```text
//! magic      6 bytes   "OTPEL1" | "OTPELp" | "OTPELb"
//! config     u64       hash of the configuration the tensors belong to
//! count      u32       number of records
//! record*    name_len u32, name utf-8, ndim u32, dims u64*ndim, data f64*numel
//! checksum   8 bytes   leading bytes of SHA-256 over everything above
//! ```
//!
//! Files are parsed completely and verified before anything is returned, and
//! written through a temporary file plus rename.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC_BACKBONE: &[u8; 6] = b"OTPEL1";
pub const MAGIC_SIDECAR: &[u8; 6] = b"OTPELp";
pub const MAGIC_BANK: &[u8; 6] = b"OTPELb";
pub const MAGIC_CORPUS: &[u8; 6] = b"OTPELd";

/// A named tensor payload as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub type Records = BTreeMap<String, Record>;

/// Stable 64-bit hash of a canonical configuration string.
pub fn hash_str(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    Sha256::digest(bytes)[..8].try_into().expect("8 bytes")
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 6]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// Appends the checksum and writes atomically.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        let sum = checksum(&self.buf);
        self.buf.extend_from_slice(&sum);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, &self.buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct ByteReader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Checks the magic and positions the cursor after it. The trailing
    /// checksum is verified separately by [`ByteReader::finish`].
    pub fn open(path: &'a Path, buf: &'a [u8], magic: &[u8; 6]) -> Result<Self> {
        if buf.len() < magic.len() {
            if magic.starts_with(buf) {
                return Err(Error::Truncated { path: path.into() });
            }
            return Err(Error::BadMagic {
                path: path.into(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        if &buf[..6] != magic {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        Ok(Self { path, buf, pos: 6 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // Bytes reserved for the trailing checksum are never payload.
        let limit = self.buf.len().saturating_sub(8);
        if self.pos.checked_add(n).is_none_or(|end| end > limit) {
            return Err(Error::Truncated {
                path: self.path.into(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn malformed(&self, reason: &str) -> Error {
        Error::Malformed {
            path: self.path.into(),
            reason: reason.into(),
        }
    }

    /// Requires that exactly the checksum remains and that it matches.
    pub fn finish(self) -> Result<()> {
        let remaining = self.buf.len() - self.pos;
        if remaining < 8 {
            return Err(Error::Truncated {
                path: self.path.into(),
            });
        }
        if remaining > 8 {
            return Err(self.malformed("trailing bytes after last record"));
        }
        if checksum(&self.buf[..self.pos]) != self.buf[self.pos..] {
            return Err(Error::Checksum {
                path: self.path.into(),
            });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a tensor file. Records are stored in name order.
pub fn write_tensor_file(path: &Path, magic: &[u8; 6], config_hash: u64, records: &Records) -> Result<()> {
    let mut w = ByteWriter::new(magic);
    w.u64(config_hash);
    w.u32(records.len() as u32);
    for (name, rec) in records {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(rec.shape.len() as u32);
        for &d in &rec.shape {
            w.u64(d as u64);
        }
        w.f64s(&rec.data);
    }
    w.finish(path)
}

/// Reads and fully verifies a tensor file, returning its config hash and
/// records. The hash is returned rather than checked so callers can report
/// which configuration they expected.
pub fn read_tensor_file(path: &Path, magic: &[u8; 6]) -> Result<(u64, Records)> {
    let buf = read_file(path)?;
    let mut r = ByteReader::open(path, &buf, magic)?;
    let hash = r.u64()?;
    let count = r.u32()?;
    let mut records = Records::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.bytes(name_len)?)
            .map_err(|_| r.malformed("record name is not utf-8"))?
            .to_owned();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.malformed("shape overflow"))?;
        let data = r.f64s(numel)?;
        if records.insert(name.clone(), Record { shape, data }).is_some() {
            return Err(r.malformed(&format!("duplicate record {name:?}")));
        }
    }
    r.finish()?;
    Ok((hash, records))
}

/// Checks a loaded hash against the expected one.
pub fn expect_hash(path: &Path, found: u64, expected: u64) -> Result<()> {
    if found != expected {
        return Err(Error::ConfigHash {
            path: path.into(),
            found,
            expected,
        });
    }
    Ok(())
}
