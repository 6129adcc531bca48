//! Named parameter vectors and their element-wise average.
//!
//! File layout: a UTF-8 header of lines
//!
//! ```text
//! ontex-vectors 1
//! dtype f64
//! entries 2
//! encoder.weight 6
//! encoder.bias 3
//! data
//! ```
//!
//! followed by the entries' values in header order as little-endian floats.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::scalar::Scalar;

const MAGIC: &str = "ontex-vectors 1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("no maps to average")]
    Empty,
    #[error("key sets differ: {0:?} present in only some maps")]
    KeyMismatch(String),
    #[error("dimension mismatch for {key}: {left} vs {right}")]
    DimensionMismatch { key: String, left: usize, right: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid entry name {0:?}")]
    InvalidName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedVectorMap<T> {
    pub entries: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> NamedVectorMap<T> {
    pub fn new(entries: BTreeMap<String, Vec<T>>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let width = std::mem::size_of::<T>();
        let dtype = if width == 4 { "f32" } else { "f64" };
        writeln!(w, "{MAGIC}\ndtype {dtype}\nentries {}", self.entries.len())?;
        for (name, values) in &self.entries {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(CheckpointError::InvalidName(name.clone()));
            }
            writeln!(w, "{name} {}", values.len())?;
        }
        writeln!(w, "data")?;
        for v in self.entries.values().flatten() {
            if width == 4 {
                w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
            } else {
                w.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(mut r: impl BufRead) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        let mut next_line = |r: &mut dyn BufRead| -> Result<String, CheckpointError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(CheckpointError::Header("unexpected end of header".into()));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        };
        let bad = |s: &str| CheckpointError::Header(s.to_string());
        if next_line(&mut r)? != MAGIC {
            return Err(bad("missing magic line"));
        }
        let dtype = next_line(&mut r)?;
        let width = match dtype.as_str() {
            "dtype f32" => 4,
            "dtype f64" => 8,
            other => return Err(bad(other)),
        };
        let count_line = next_line(&mut r)?;
        let count: usize = count_line.strip_prefix("entries ").and_then(|n| n.parse().ok()).ok_or_else(|| bad(&count_line))?;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(&mut r)?;
            let (name, dim) = l.rsplit_once(' ').ok_or_else(|| bad(&l))?;
            let dim: usize = dim.parse().map_err(|_| bad(&l))?;
            table.push((name.to_string(), dim));
        }
        if next_line(&mut r)? != "data" {
            return Err(bad("missing data marker"));
        }
        let mut entries = BTreeMap::new();
        let mut buf = [0u8; 8];
        for (name, dim) in table {
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut buf[..width])?;
                let x = if width == 4 {
                    f32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(buf)
                };
                values.push(T::lit(x));
            }
            if entries.insert(name.clone(), values).is_some() {
                return Err(bad(&format!("duplicate entry {name}")));
            }
        }
        if r.read(&mut buf[..1])? != 0 {
            return Err(bad("trailing bytes after data"));
        }
        Ok(Self { entries })
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Element-wise arithmetic mean, computed as `min + sum(x - min) / K` over
/// each element's sorted values: independent of the order of `maps`, and
/// exact when all values agree.
pub fn average_named_vectors<T: Scalar>(maps: &[NamedVectorMap<T>]) -> Result<NamedVectorMap<T>, CheckpointError> {
    let first = maps.first().ok_or(CheckpointError::Empty)?;
    for m in &maps[1..] {
        if let Some(k) = m.entries.keys().find(|k| !first.entries.contains_key(*k)) {
            return Err(CheckpointError::KeyMismatch(k.clone()));
        }
        if let Some(k) = first.entries.keys().find(|k| !m.entries.contains_key(*k)) {
            return Err(CheckpointError::KeyMismatch(k.clone()));
        }
        for (k, v) in &m.entries {
            let left = first.entries[k].len();
            if v.len() != left {
                return Err(CheckpointError::DimensionMismatch { key: k.clone(), left, right: v.len() });
            }
        }
    }
    let k = T::lit(maps.len() as f64);
    let mut column = Vec::with_capacity(maps.len());
    let entries = first
        .entries
        .iter()
        .map(|(name, v)| {
            let mean = (0..v.len())
                .map(|i| {
                    column.clear();
                    column.extend(maps.iter().map(|m| m.entries[name][i]));
                    column.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                    let low = column[0];
                    low + column.iter().map(|&x| x - low).sum::<T>() / k
                })
                .collect();
            (name.clone(), mean)
        })
        .collect();
    Ok(NamedVectorMap { entries })
}
