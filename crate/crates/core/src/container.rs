//! Versioned binary container of named little-endian `f64` arrays.
//!
//! Layout:
//! ```text
//! magic[8] | version u32 | header_len u64 | header (UTF-8 JSON)
//! | n_arrays u32 | { name_len u32 | name | rows u64 | cols u64 | rows*cols f64 }*
//! ```

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: String,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn encode(&self, magic: &[u8; 8]) -> Vec<u8> {
        let payload: usize = self.arrays.iter().map(|a| 20 + a.name.len() + 8 * a.values.len()).sum();
        let mut out = Vec::with_capacity(24 + self.header.len() + payload);
        out.extend_from_slice(magic);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            debug_assert_eq!(a.rows * a.cols, a.values.len());
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.rows as u64).to_le_bytes());
            out.extend_from_slice(&(a.cols as u64).to_le_bytes());
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], magic: &[u8; 8], path: &str) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != magic {
            return Err(r.error("wrong magic bytes"));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(r.error(&format!("unsupported container version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header =
            String::from_utf8(r.take(header_len)?.to_vec()).map_err(|_| r.error("header is not valid UTF-8"))?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.error("array name is not UTF-8"))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows.checked_mul(cols).ok_or_else(|| r.error("array size overflows"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| r.error("array size overflows"))?)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push(NamedArray { name, rows, cols, values });
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after last array"));
        }
        Ok(Container { header, arrays })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn error(&self, message: &str) -> Error {
        Error::Format { path: self.path.to_string(), message: format!("{message} (offset {})", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
