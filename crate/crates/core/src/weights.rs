//! The `LGTW` tensor container.
//!
//! ```text
//! "LGTW"  u32 version  u32 count
//! count × { u16 name_len, name, u8 rank, rank × u32 dim, f32 data }
//! ```
//!
//! All integers and floats little-endian. Selector datasets use the same
//! container with entries `z/<i>` and `y/<i>`.

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, FormatError, Result};
use crate::model::NamedTensors;
use crate::select::SelectorDataset;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LGTW";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAX_RANK: u8 = 8;

/// Serialises entries in iteration order.
pub fn encode<'a, I>(entries: I) -> Result<Vec<u8>, FormatError>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name) {
            return Err(FormatError::DuplicateName(name.to_string()));
        }
        let len = u16::try_from(name.len()).map_err(|_| FormatError::NameTooLong(name.len()))?;
        if t.rank() == 0 || t.rank() > MAX_RANK as usize {
            return Err(FormatError::InvalidRank {
                name: name.to_string(),
                rank: t.rank().min(255) as u8,
            });
        }
        if !t.is_finite() {
            return Err(FormatError::NonFinite(name.to_string()));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.reserve(t.len() * 4);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.bytes.len(),
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a whole container; any defect rejects the file.
pub fn decode(bytes: &[u8]) -> Result<NamedTensors, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = IndexMap::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| FormatError::InvalidName)?
            .to_string();
        let rank = r.u8("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(FormatError::InvalidRank { name, rank });
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        if dims.contains(&0) {
            return Err(FormatError::ZeroDim(name));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(FormatError::Truncated {
                offset: bytes.len(),
                what: "tensor data",
            })?;
        let raw = r.take(count, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(name));
        }
        if out.contains_key(&name) {
            return Err(FormatError::DuplicateName(name));
        }
        let t = Tensor::new(&dims, data).expect("dims checked");
        out.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save_weights(path: &Path, named: &NamedTensors) -> Result<()> {
    let bytes = encode(named.iter().map(|(n, t)| (n.as_str(), t)))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path)?;
    Ok(decode(&bytes)?)
}

pub fn dataset_to_named(data: &SelectorDataset) -> NamedTensors {
    let mut out = IndexMap::with_capacity(2 * data.len());
    for i in 0..data.len() {
        let z = Tensor::new(&[data.input_dim()], data.z.row(i).to_vec()).expect("row");
        let y = Tensor::new(&[data.choices()], data.y.row(i).to_vec()).expect("row");
        out.insert(format!("z/{i}"), z);
        out.insert(format!("y/{i}"), y);
    }
    out
}

/// Requires `z/0..n` and `y/0..n` with consistent lengths and nothing else.
pub fn dataset_from_named(named: &NamedTensors) -> Result<SelectorDataset> {
    let n = named.len() / 2;
    if n == 0 || named.len() % 2 != 0 {
        return Err(Error::Parse(format!(
            "dataset needs paired z/<i>, y/<i> entries, found {}",
            named.len()
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let get = |key: String| named.get(&key).ok_or(Error::MissingTensor(key));
        let z = get(format!("z/{i}"))?;
        let y = get(format!("y/{i}"))?;
        if z.rank() != 1 || y.rank() != 1 {
            return Err(Error::Parse(format!("sample {i} must hold vectors")));
        }
        let label = crate::select::LabelVector::from_values(y.data().to_vec())?;
        samples.push((z.data().to_vec(), label));
    }
    SelectorDataset::from_samples(&samples)
}

pub fn save_dataset(path: &Path, data: &SelectorDataset) -> Result<()> {
    save_weights(path, &dataset_to_named(data))
}

pub fn load_dataset(path: &Path) -> Result<SelectorDataset> {
    dataset_from_named(&load_weights(path)?)
}
