//! The `.acnx` named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ACNX"  u32 version  u32 count
//! count x { u32 name_len, name (UTF-8), u8 dtype, u8 rank, rank x u32 dim, u64 offset }
//! u64 payload_len  payload  u32 crc32(all preceding bytes)
//! ```
//!
//! Entries are sorted by name; offsets are relative to the payload start.
//! The only dtype is `0` (f32).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ACNX";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Tensors keyed by canonical dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

/// Outcome of [`Checkpoint::apply`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ApplyReport {
    pub loaded: Vec<String>,
    /// In the model, absent from the checkpoint.
    pub missing: Vec<String>,
    /// In the checkpoint, absent from the model.
    pub unexpected: Vec<String>,
    /// Present in both with different shapes; left untouched.
    pub shape_conflicts: Vec<String>,
}

impl ApplyReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape_conflicts.is_empty()
    }

    pub fn unmatched(&self) -> impl Iterator<Item = &String> {
        self.missing.iter().chain(&self.unexpected).chain(&self.shape_conflicts)
    }
}

impl std::fmt::Display for ApplyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} loaded", self.loaded.len())?;
        for (label, names) in [
            ("missing", &self.missing),
            ("unexpected", &self.unexpected),
            ("shape conflict", &self.shape_conflicts),
        ] {
            if !names.is_empty() {
                write!(f, "; {label}: {}", names.join(", "))?;
            }
        }
        Ok(())
    }
}

fn truncated(what: &str) -> Error {
    CheckpointError::Truncated(what.into()).into()
}

fn malformed(msg: String) -> Error {
    CheckpointError::Malformed(msg).into()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Every tensor in the store, buffers included.
    pub fn from_params(params: &ParamStore<f32>) -> Self {
        Self {
            tensors: params.iter().map(|(_, e)| (e.name.clone(), e.value.clone())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version).into());
        }
        // Checksum before parsing the table so corruption anywhere is
        // reported as such rather than as a confusing structural error.
        if bytes.len() < 16 {
            return Err(truncated("checksum"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }
        let mut c = Cursor { bytes: body, pos: 8 };
        let count = c.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = c.u32("name length")? as usize;
            let name = std::str::from_utf8(c.take(name_len, "name")?)
                .map_err(|_| malformed(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let dtype = c.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(malformed(format!("{name}: unsupported dtype {dtype}")));
            }
            let rank = c.u8("rank")? as usize;
            let shape = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = c.u64("offset")?;
            entries.push((name, shape, offset));
        }
        let payload_len = c.u64("payload length")?;
        let payload = c.take(
            usize::try_from(payload_len).map_err(|_| truncated("payload"))?,
            "payload",
        )?;
        if c.pos != body.len() {
            return Err(malformed(format!("{} trailing bytes", body.len() - c.pos)));
        }

        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
        let mut tensors = BTreeMap::new();
        for (name, shape, offset) in &entries {
            let n: u64 = shape.iter().map(|&d| d as u64).product();
            let size = 4 * n;
            let end = offset.checked_add(size).filter(|&e| e <= payload_len);
            let Some(end) = end else {
                return Err(malformed(format!("{name}: data out of bounds")));
            };
            spans.push((*offset, end, name));
            let raw = &payload[*offset as usize..end as usize];
            let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            let t = Tensor::from_values(shape, values).map_err(|e| malformed(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(malformed(format!("duplicate entry {name}")));
            }
        }
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(malformed(format!("{} overlaps {}", pair[1].2, pair[0].2)));
            }
        }
        let total: u64 = spans.iter().map(|(s, e, _)| e - s).sum();
        if total != payload_len {
            return Err(malformed(format!("entries cover {total} of {payload_len} payload bytes")));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Copies matching tensors into `params`. In strict mode any missing,
    /// unexpected or mis-shaped tensor is an error and nothing is copied.
    pub fn apply(&self, params: &mut ParamStore<f32>, strict: bool) -> Result<ApplyReport> {
        let mut report = ApplyReport::default();
        let mut plan = Vec::new();
        for (id, entry) in params.iter() {
            match self.tensors.get(&entry.name) {
                None => report.missing.push(entry.name.clone()),
                Some(t) if t.shape() != entry.value.shape() => report.shape_conflicts.push(format!(
                    "{} (checkpoint {:?}, model {:?})",
                    entry.name,
                    t.shape(),
                    entry.value.shape()
                )),
                Some(t) => plan.push((id, entry.name.clone(), t)),
            }
        }
        report.unexpected = self
            .tensors
            .keys()
            .filter(|name| params.id(name).is_none())
            .cloned()
            .collect();
        if strict && !report.is_clean() {
            return Err(CheckpointError::Mismatch(report.to_string()).into());
        }
        for (id, name, t) in plan {
            params.replace(id, t.clone())?;
            report.loaded.push(name);
        }
        report.loaded.sort();
        Ok(report)
    }

    /// Learnable scalar count, using `params` to tell weights from buffers.
    pub fn learnable_count(&self, params: &ParamStore<f32>) -> usize {
        self.tensors
            .iter()
            .filter(|(name, _)| {
                params
                    .id(name)
                    .is_some_and(|id| params.entry(id).kind != ParamKind::Buffer)
            })
            .map(|(_, t)| t.len())
            .sum()
    }
}
