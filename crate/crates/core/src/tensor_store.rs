//! Named-tensor checkpoint files.
//!
//! The on-disk layout is the safetensors layout:
//!
//! ```text
//! [0..8)       little-endian u64 N, the header length
//! [8..8+N)     UTF-8 JSON: {name: {"dtype", "shape", "data_offsets"}, "__metadata__": {..}}
//! [8+N..)      data region, offsets relative to its start
//! ```
//!
//! Writers lay tensors out contiguously in lexicographic name order and pad
//! the header with spaces to an 8-byte boundary, so identical checkpoints
//! always serialize to identical bytes. Readers accept any contiguous layout.
//!
//! [`CheckpointRef`] parses and validates only the header; tensor payloads
//! are read one at a time with [`CheckpointRef::read_tensor`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

const METADATA_KEY: &str = "__metadata__";
/// Headers larger than this are rejected before allocation.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor data overlaps: {first:?} and {second:?}")]
    OffsetOverlap { first: String, second: String },
    #[error("gap in data region before tensor {0:?}")]
    OffsetGap(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io { path: path.to_path_buf(), source }
    }

    fn invalid(name: &str, reason: impl Into<String>) -> Self {
        StoreError::InvalidTensor { name: name.to_string(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }

    pub fn is_floating(self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F64)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
            Dtype::I64 => "I64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F64" => Some(Dtype::F64),
            "I64" => Some(Dtype::I64),
            _ => None,
        }
    }
}

/// Element buffer of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::I64(_) => Dtype::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating elements widened to f64; `None` for integer tensors.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match self {
            TensorData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Some(v.clone()),
            TensorData::I64(_) => None,
        }
    }

    /// Narrow f64 values to a floating dtype (round to nearest).
    pub fn from_f64(dtype: Dtype, values: Vec<f64>) -> Option<Self> {
        match dtype {
            Dtype::F32 => Some(TensorData::F32(values.into_iter().map(|x| x as f32).collect())),
            Dtype::F64 => Some(TensorData::F64(values)),
            Dtype::I64 => None,
        }
    }

    /// Bitwise equality (distinguishes -0.0 from 0.0, equal NaN payloads match).
    pub fn bits_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn decode_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::I64 => TensorData::I64(
                bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }
}

/// A shaped element buffer whose length always matches its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected = checked_numel(&shape)
            .ok_or_else(|| StoreError::invalid("<anonymous>", "shape overflows"))?;
        if expected != data.len() {
            return Err(StoreError::invalid(
                "<anonymous>",
                format!("shape {shape:?} needs {expected} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(values))
    }

    pub fn i64(shape: Vec<usize>, values: Vec<i64>) -> Result<Self> {
        Self::new(shape, TensorData::I64(values))
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape && self.data.bits_eq(&other.data)
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Header entry for one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Half-open byte range relative to the start of the data region.
    pub byte_range: Range<u64>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// An in-memory checkpoint: tensors keyed by name, iterated lexicographically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a checkpoint from a list, rejecting repeated names.
    pub fn from_tensors<I, N>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (N, Tensor)>,
        N: Into<String>,
    {
        let mut cp = Self::new();
        for (name, tensor) in tensors {
            cp.insert(name, tensor)?;
        }
        Ok(cp)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.tensors.contains_key(&name) {
            return Err(StoreError::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn replace_metadata(&mut self, metadata: BTreeMap<String, String>) {
        self.metadata = metadata;
    }

    /// Tensor-wise bitwise equality; metadata is not compared.
    pub fn bits_eq(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((an, at), (bn, bt))| an == bn && at.bits_eq(bt))
    }

    /// Serializes to the container layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta: Map<String, Value> =
                self.metadata.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
            header.insert(METADATA_KEY.to_string(), Value::Object(meta));
        }
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            let len = (tensor.data.len() * tensor.dtype().width()) as u64;
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": tensor.dtype().as_str(),
                    "shape": tensor.shape,
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        let mut header_bytes = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }

        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for tensor in self.tensors.values() {
            tensor.data.write_le(&mut out);
        }
        Ok(out)
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(StoreError::invalid(name, "empty tensor name"));
    }
    if name == METADATA_KEY {
        return Err(StoreError::invalid(name, "reserved name"));
    }
    Ok(())
}

/// Writes `cp` to `destination`, replacing any existing file.
pub fn write_checkpoint(cp: &Checkpoint, destination: impl AsRef<Path>) -> Result<()> {
    let path = destination.as_ref();
    let bytes = cp.to_bytes()?;
    let mut file = File::create(path).map_err(|e| StoreError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| StoreError::io(path, e))?;
    file.sync_all().map_err(|e| StoreError::io(path, e))
}

pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointRef> {
    CheckpointRef::open(path)
}

/// Reads a whole checkpoint into memory.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    CheckpointRef::open(path)?.load()
}

#[derive(Clone, Debug)]
enum Source {
    File(PathBuf),
    Memory(Arc<[u8]>),
}

/// A validated checkpoint header plus a handle to its data.
///
/// Cloning is cheap and the handle is safe to share between threads; each
/// [`read_tensor`](Self::read_tensor) call reads only that tensor's bytes.
#[derive(Clone, Debug)]
pub struct CheckpointRef {
    source: Source,
    data_start: u64,
    specs: Vec<TensorSpec>,
    metadata: BTreeMap<String, String>,
}

impl CheckpointRef {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| StoreError::io(path, e))?;
        let file_len = file.metadata().map_err(|e| StoreError::io(path, e))?.len();
        let mut prefix = [0u8; 8];
        read_exact_or_truncated(&mut file, &mut prefix, "header length prefix", path)?;
        let header_len = u64::from_le_bytes(prefix);
        check_header_len(header_len, file_len)?;
        let mut header = vec![0u8; header_len as usize];
        read_exact_or_truncated(&mut file, &mut header, "header", path)?;
        Self::from_header(Source::File(path.to_path_buf()), &header, file_len)
    }

    /// Parses a checkpoint held in memory (for example the output of
    /// [`Checkpoint::to_bytes`]).
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>) -> Result<Self> {
        let bytes: Arc<[u8]> = bytes.into();
        if bytes.len() < 8 {
            return Err(StoreError::Truncated("missing header length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        check_header_len(header_len, bytes.len() as u64)?;
        let header = bytes[8..8 + header_len as usize].to_vec();
        let total = bytes.len() as u64;
        Self::from_header(Source::Memory(bytes), &header, total)
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        Self::from_bytes(cp.to_bytes()?)
    }

    fn from_header(source: Source, header: &[u8], total_len: u64) -> Result<Self> {
        let data_start = 8 + header.len() as u64;
        let data_len = total_len - data_start;
        let text = std::str::from_utf8(header)
            .map_err(|e| StoreError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let root: Value = serde_json::from_str(text)
            .map_err(|e| StoreError::MalformedHeader(format!("header is not JSON: {e}")))?;
        if !root.is_object() {
            return Err(StoreError::MalformedHeader("header is not a JSON object".into()));
        }
        // A map would silently keep only the last of two equal keys.
        let HeaderEntries(entries) = serde_json::from_str(text)
            .map_err(|e| StoreError::MalformedHeader(format!("header is not JSON: {e}")))?;

        let mut metadata = None;
        let mut specs: Vec<TensorSpec> = Vec::with_capacity(entries.len());
        for (name, entry) in entries {
            if name == METADATA_KEY {
                if metadata.is_some() {
                    return Err(StoreError::DuplicateName(name));
                }
                metadata = Some(parse_metadata(entry)?);
                continue;
            }
            if specs.iter().any(|s| s.name == name) {
                return Err(StoreError::DuplicateName(name));
            }
            specs.push(parse_entry(name, entry)?);
        }
        let metadata = metadata.unwrap_or_default();
        validate_layout(&specs, data_len)?;
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Self { source, data_start, specs, metadata })
    }

    /// Tensor specs in lexicographic name order.
    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.binary_search_by(|s| s.name.as_str().cmp(name)).ok().map(|i| &self.specs[i])
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.source {
            Source::File(p) => Some(p),
            Source::Memory(_) => None,
        }
    }

    pub fn read_tensor(&self, name: &str) -> Result<(TensorSpec, Tensor)> {
        let spec = self.spec(name).ok_or_else(|| StoreError::UnknownTensor(name.to_string()))?;
        let len = (spec.byte_range.end - spec.byte_range.start) as usize;
        let start = self.data_start + spec.byte_range.start;
        let data = match &self.source {
            Source::Memory(bytes) => {
                TensorData::decode_le(spec.dtype, &bytes[start as usize..start as usize + len])
            }
            Source::File(path) => {
                let mut file = File::open(path).map_err(|e| StoreError::io(path, e))?;
                file.seek(SeekFrom::Start(start)).map_err(|e| StoreError::io(path, e))?;
                let mut buf = vec![0u8; len];
                read_exact_or_truncated(&mut file, &mut buf, name, path)?;
                TensorData::decode_le(spec.dtype, &buf)
            }
        };
        let tensor = Tensor::new(spec.shape.clone(), data)?;
        Ok((spec.clone(), tensor))
    }

    /// Reads every tensor.
    pub fn load(&self) -> Result<Checkpoint> {
        let mut cp = Checkpoint::new();
        for spec in &self.specs {
            let (_, tensor) = self.read_tensor(&spec.name)?;
            cp.insert(spec.name.clone(), tensor)?;
        }
        cp.replace_metadata(self.metadata.clone());
        Ok(cp)
    }

    /// (name, dtype, shape) table used for compatibility checks.
    pub fn schema(&self) -> impl Iterator<Item = (&str, Dtype, &[usize])> {
        self.specs.iter().map(|s| (s.name.as_str(), s.dtype, s.shape.as_slice()))
    }
}

/// Header object entries in file order, duplicates included.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl<'de> serde::de::Visitor<'de> for Visitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: serde::de::MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some(entry) = map.next_entry::<String, Value>()? {
                    entries.push(entry);
                }
                Ok(HeaderEntries(entries))
            }
        }
        d.deserialize_map(Visitor)
    }
}

fn check_header_len(header_len: u64, total_len: u64) -> Result<()> {
    if header_len > MAX_HEADER_LEN {
        return Err(StoreError::MalformedHeader(format!("header length {header_len} is too large")));
    }
    if 8 + header_len > total_len {
        return Err(StoreError::Truncated(format!(
            "header declares {header_len} bytes, file has {}",
            total_len.saturating_sub(8)
        )));
    }
    Ok(())
}

fn read_exact_or_truncated(file: &mut File, buf: &mut [u8], what: &str, path: &Path) -> Result<()> {
    file.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            StoreError::Truncated(format!("unexpected end of file reading {what}"))
        } else {
            StoreError::io(path, e)
        }
    })
}

fn parse_metadata(entry: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = entry else {
        return Err(StoreError::MalformedHeader("__metadata__ is not an object".into()));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(StoreError::MalformedHeader(format!(
                "metadata value for {k:?} is not a string: {other}"
            ))),
        })
        .collect()
}

fn parse_entry(name: String, entry: Value) -> Result<TensorSpec> {
    let bad = |reason: &str| StoreError::MalformedHeader(format!("tensor {name:?}: {reason}"));
    if name.is_empty() {
        return Err(StoreError::MalformedHeader("empty tensor name".into()));
    }
    let Value::Object(fields) = entry else {
        return Err(bad("entry is not an object"));
    };
    let dtype = fields
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?;
    let dtype = Dtype::parse(dtype).ok_or_else(|| bad(&format!("unsupported dtype {dtype:?}")))?;
    let shape = fields
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
        .collect::<Option<Vec<usize>>>()
        .ok_or_else(|| bad("shape extents must be non-negative integers"))?;
    let offsets = fields
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets"))?;
    let [begin, end] = offsets.as_slice() else {
        return Err(bad("data_offsets must have two entries"));
    };
    let (Some(begin), Some(end)) = (begin.as_u64(), end.as_u64()) else {
        return Err(bad("data_offsets must be non-negative integers"));
    };
    if begin > end {
        return Err(bad("data_offsets begin exceeds end"));
    }
    let expected = checked_numel(&shape)
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or_else(|| bad("shape overflows"))?;
    if (end - begin) as u128 != expected as u128 {
        return Err(bad(&format!(
            "byte range holds {} bytes, shape {shape:?} of {} needs {expected}",
            end - begin,
            dtype.as_str()
        )));
    }
    Ok(TensorSpec { name, dtype, shape, byte_range: begin..end })
}

/// Ranges must tile `[0, data_len)` exactly (empty tensors may sit anywhere
/// inside it).
fn validate_layout(specs: &[TensorSpec], data_len: u64) -> Result<()> {
    let mut order: Vec<&TensorSpec> = specs.iter().collect();
    order.sort_by(|a, b| {
        (a.byte_range.start, a.byte_range.end, &a.name).cmp(&(
            b.byte_range.start,
            b.byte_range.end,
            &b.name,
        ))
    });
    let mut cursor = 0u64;
    let mut last_nonempty: Option<&TensorSpec> = None;
    for spec in order {
        if spec.byte_range.end > data_len {
            return Err(StoreError::Truncated(format!(
                "tensor {:?} ends at {} but data region has {data_len} bytes",
                spec.name, spec.byte_range.end
            )));
        }
        if spec.byte_range.is_empty() {
            if spec.byte_range.start > cursor {
                return Err(StoreError::OffsetGap(spec.name.clone()));
            }
            continue;
        }
        if spec.byte_range.start < cursor {
            return Err(StoreError::OffsetOverlap {
                first: last_nonempty.map(|s| s.name.clone()).unwrap_or_default(),
                second: spec.name.clone(),
            });
        }
        if spec.byte_range.start > cursor {
            return Err(StoreError::OffsetGap(spec.name.clone()));
        }
        cursor = spec.byte_range.end;
        last_nonempty = Some(spec);
    }
    if cursor != data_len {
        return Err(StoreError::MalformedHeader(format!(
            "{} trailing bytes after the last tensor",
            data_len - cursor
        )));
    }
    Ok(())
}
