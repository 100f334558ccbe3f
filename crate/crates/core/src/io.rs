//! Binary container shared by the snapshot, basis and operator files: one
//! UTF-8 header line of space-separated tokens, then a payload of
//! little-endian `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct ContainerWriter {
    buf: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(header: &str) -> Self {
        debug_assert!(!header.contains('\n'));
        let mut buf = Vec::with_capacity(header.len() + 1);
        buf.extend_from_slice(header.as_bytes());
        buf.push(b'\n');
        Self { buf }
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn slice(&mut self, vs: &[f64]) {
        self.buf.reserve(8 * vs.len());
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct ContainerReader {
    bytes: Vec<u8>,
    pos: usize,
    tokens: Vec<String>,
}

impl ContainerReader {
    /// Reads the file and checks the magic and version tokens.
    pub fn open(path: &Path, magic: &str, version: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes, magic, version)
    }

    pub fn from_bytes(bytes: Vec<u8>, magic: &str, version: &str) -> Result<Self> {
        let end = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: "missing header line terminator".into(),
        })?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|e| Error::Format {
            offset: e.valid_up_to() as u64,
            message: "header is not valid UTF-8".into(),
        })?;
        let tokens: Vec<String> = header.split_whitespace().map(str::to_owned).collect();
        if tokens.first().map(String::as_str) != Some(magic) {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic: expected `{magic}`, found `{}`", tokens.first().map(String::as_str).unwrap_or("")),
            });
        }
        if tokens.get(1).map(String::as_str) != Some(version) {
            return Err(Error::Format {
                offset: magic.len() as u64 + 1,
                message: format!("unsupported version, expected `{version}`"),
            });
        }
        Ok(Self {
            bytes,
            pos: end + 1,
            tokens,
        })
    }

    /// Header tokens after magic and version.
    pub fn fields(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn field<T: std::str::FromStr>(&self, idx: usize, name: &str) -> Result<T> {
        let tok = self.fields().get(idx).ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("header is missing field `{name}`"),
        })?;
        tok.parse().map_err(|_| Error::Format {
            offset: 0,
            message: format!("header field `{name}` has invalid value `{tok}`"),
        })
    }

    pub fn expect_field_count(&self, n: usize) -> Result<()> {
        if self.fields().len() != n {
            return Err(Error::Format {
                offset: 0,
                message: format!("header has {} fields, expected {n}", self.fields().len()),
            });
        }
        Ok(())
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn f64(&mut self) -> Result<f64> {
        if self.pos + 8 > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated payload: need 8 bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&self.bytes[self.pos..self.pos + 8]);
        self.pos += 8;
        Ok(f64::from_le_bytes(raw))
    }

    pub fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = 8 * n;
        if self.pos + need > self.bytes.len() {
            let avail = self.bytes.len() - self.pos;
            return Err(Error::Format {
                offset: (self.pos + avail - avail % 8) as u64,
                message: format!("truncated payload: need {need} bytes, {avail} remain"),
            });
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        self.pos += need;
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("{} trailing bytes after payload", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_payload_reports_offset() {
        let mut w = ContainerWriter::new("MAGIC v1 3");
        w.slice(&[1.0, 2.0, 3.0]);
        let mut bytes = w.buf;
        bytes.truncate(bytes.len() - 4);
        let mut r = ContainerReader::from_bytes(bytes, "MAGIC", "v1").unwrap();
        let err = r.vec(3).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 11 + 16),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1e-300, 4e-3, std::f64::consts::PI, -0.0] {
            let back: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}
