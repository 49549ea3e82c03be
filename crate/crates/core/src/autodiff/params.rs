//! Named parameter sets and their on-disk container.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "TRKPARAM"
//! offset 8   u32       container format version (currently 1)
//! offset 12  u64       header length H in bytes
//! offset 20  H bytes   UTF-8 JSON header
//! offset 20+H          data section: raw little-endian tensor elements
//! ```
//!
//! The JSON header holds `format_version`, free-form `metadata`, the total
//! `data_len`, a `sha256` hex digest of the data section, and `entries`: one
//! `{name, dtype, shape, offset, nbytes}` record per tensor in set order, with
//! `offset` relative to the start of the data section.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AutodiffError, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"TRKPARAM";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ParamFileError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a parameter file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt parameter file: {0}")]
    Corrupt(String),
    #[error("corrupt parameter header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checksum mismatch: header says {expected}, data hashes to {actual}")]
    Checksum { expected: String, actual: String },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EntryHeader {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FileHeader {
    pub format_version: u32,
    pub metadata: serde_json::Value,
    pub data_len: usize,
    pub sha256: String,
    pub entries: Vec<EntryHeader>,
}

impl FileHeader {
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }
}

/// Ordered map from parameter name to tensor. Iteration follows insertion order.
///
/// Tensors are copy-on-write: cloning a set or binding it onto a graph shares
/// storage until one side is mutated.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    tensors: IndexMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: IndexMap::new(),
        }
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub(crate) fn iter_shared(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<T>>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Same names, same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(Tensor::zeros(v.shape()))))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.len() == other.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn check_layout(&self, other: &ParamSet<T>, op: &'static str) -> Result<(), AutodiffError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(AutodiffError::Shape {
                op,
                shapes: vec![
                    self.tensors.values().map(|t| t.len()).collect(),
                    other.tensors.values().map(|t| t.len()).collect(),
                ],
            })
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Appends every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) {
        for (k, v) in other.iter() {
            self.insert(&format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    /// Serializes to the container format.
    pub fn to_bytes(&self, metadata: serde_json::Value) -> Vec<u8> {
        let mut data = Vec::with_capacity(self.parameter_count() * T::DTYPE.size_of());
        let mut entries = Vec::with_capacity(self.len());
        for (name, t) in self.iter() {
            let offset = data.len();
            for &v in t.data() {
                v.write_le(&mut data);
            }
            entries.push(EntryHeader {
                name: name.to_string(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
                nbytes: data.len() - offset,
            });
        }
        let header = FileHeader {
            format_version: FORMAT_VERSION,
            metadata,
            data_len: data.len(),
            sha256: hex_digest(&data),
            entries,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + header_json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&data);
        out
    }

    /// Parses a container, converting stored elements to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value), ParamFileError> {
        let (header, data) = read_container(bytes)?;
        let mut set = ParamSet::new();
        for e in &header.entries {
            let raw = &data[e.offset..e.offset + e.nbytes];
            let values: Vec<T> = match e.dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
            };
            let t = Tensor::new(e.shape.clone(), values).map_err(|err| ParamFileError::Corrupt(err.to_string()))?;
            set.insert(&e.name, t);
        }
        Ok((set, header.metadata))
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<(), ParamFileError> {
        let bytes = self.to_bytes(metadata);
        let io_err = |source| ParamFileError::Io {
            path: path.display().to_string(),
            source,
        };
        // Write-then-rename so a crash never leaves a torn file behind.
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), ParamFileError> {
        let bytes = fs::read(path).map_err(|source| ParamFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Validates the container and returns the header and data section.
pub fn read_container(bytes: &[u8]) -> Result<(FileHeader, &[u8]), ParamFileError> {
    if bytes.len() < PREAMBLE {
        if bytes.len() >= 8 && &bytes[..8] != MAGIC {
            return Err(ParamFileError::BadMagic);
        }
        return Err(ParamFileError::Corrupt(format!(
            "file is {} bytes, shorter than the {PREAMBLE}-byte preamble",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(ParamFileError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ParamFileError::UnsupportedVersion(version));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[PREAMBLE..];
    if hlen > body.len() {
        return Err(ParamFileError::Corrupt(format!(
            "header length {hlen} exceeds remaining {} bytes",
            body.len()
        )));
    }
    let header: FileHeader = serde_json::from_slice(&body[..hlen])?;
    let data = &body[hlen..];
    if data.len() != header.data_len {
        return Err(ParamFileError::Corrupt(format!(
            "data section is {} bytes, header declares {}",
            data.len(),
            header.data_len
        )));
    }
    for e in &header.entries {
        let elems: usize = e.shape.iter().product();
        if elems * e.dtype.size_of() != e.nbytes || e.offset + e.nbytes > data.len() {
            return Err(ParamFileError::Corrupt(format!("entry {} out of range", e.name)));
        }
    }
    let actual = hex_digest(data);
    if actual != header.sha256 {
        return Err(ParamFileError::Checksum {
            expected: header.sha256.clone(),
            actual,
        });
    }
    Ok((header, data))
}

pub fn hex_digest(data: &[u8]) -> String {
    let digest = Sha256::digest(data);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
