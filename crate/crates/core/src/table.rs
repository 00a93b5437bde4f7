//! Binary tensor-table container shared by checkpoints, corpus images, and
//! activation dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "VLBRIDGE"
//! version    u32      FORMAT_VERSION
//! meta_len   u64      followed by meta_len bytes of UTF-8 `key = value` lines
//! count      u64      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents u64 × rank
//!   data     f64 × product(extents)
//! checksum   u64      FNV-1a over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VLBRIDGE";
pub const FORMAT_VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Ordered metadata plus named tensors.
#[derive(Clone, Debug, Default)]
pub struct TensorTable {
    pub meta: BTreeMap<String, String>,
    pub tensors: IndexMap<String, Tensor>,
    /// Byte offset of each tensor record when parsed from bytes.
    offsets: IndexMap<String, u64>,
}

impl TensorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid("tensor_table", format!("missing meta key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| Error::invalid("tensor_table", format!("bad value `{v}` for meta key `{key}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), t.detach());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("tensor_table", format!("missing tensor `{name}`")))
    }

    /// Byte offset where `name` started in the parsed file.
    pub fn offset_of(&self, name: &str) -> Option<u64> {
        self.offsets.get(name).copied()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parses a table; `source` only labels error messages.
    pub fn from_bytes(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, source };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(r.err_at(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err_at(8, &format!("unsupported format version {version}")));
        }
        if bytes.len() < 8 {
            return Err(r.err("truncated"));
        }
        let body_end = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
        if fnv1a(&bytes[..body_end]) != stored {
            return Err(r.err_at(body_end as u64, "checksum mismatch"));
        }
        r.bytes = &bytes[..body_end];

        let meta_len = r.u64()? as usize;
        let meta_at = r.pos;
        let meta_text =
            std::str::from_utf8(r.take(meta_len)?).map_err(|_| r.err_at(meta_at as u64, "meta block is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| r.err_at(meta_at as u64, &format!("bad meta line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }

        let count = r.u64()?;
        let mut tensors = IndexMap::new();
        let mut offsets = IndexMap::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err_at(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 16 {
                return Err(r.err_at(at, &format!("implausible rank {rank} for `{name}`")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.err_at(at, &format!("tensor `{name}` extends past end of file")))?;
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.err_at(at, &e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(r.err_at(at, &format!("duplicate tensor `{name}`")));
            }
            offsets.insert(name, at);
        }
        if r.remaining() != 0 {
            return Err(r.err("trailing bytes after tensor table"));
        }
        Ok(TensorTable { meta, tensors, offsets })
    }

    /// Writes the table; refuses to replace an existing file unless `overwrite`.
    pub fn save(&self, path: &Path, overwrite: bool) -> Result<()> {
        if path.exists() && !overwrite {
            return Err(Error::OutputExists(path.to_path_buf()));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len().saturating_sub(self.pos)
    }

    fn err_at(&self, offset: u64, msg: &str) -> Error {
        Error::Format {
            path: self.source.to_string(),
            offset,
            msg: msg.to_string(),
        }
    }

    fn err(&self, msg: &str) -> Error {
        self.err_at(self.pos as u64, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err("unexpected end of file"));
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
