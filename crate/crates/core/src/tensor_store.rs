//! Tensor I/O: safetensors input files and the CMPQ quantized container.
//!
//! Safetensors layout: an 8-byte little-endian header length `N`, `N` bytes of
//! JSON header mapping tensor names to `{dtype, shape, data_offsets}`, then the
//! raw little-endian tensor bytes. Offsets are relative to the start of the
//! data section. Only `F16` and `F32` tensors are accepted; everything is
//! widened to `f32` in memory.
//!
//! The CMPQ container layout is:
//!
//! ```text
//! magic        4 bytes   "CMPQ"
//! version      u16       CONTAINER_VERSION
//! reserved     u16       0
//! meta_len     u32       length of the JSON metadata blob
//! metadata     meta_len  UTF-8 JSON (ContainerMetadata)
//! layer_count  u32
//! header_crc   u32       CRC-32 of every byte above
//! layer_count times:
//!   record_len u64
//!   record     record_len bytes (see `pack` for the record layout)
//!   record_crc u32       CRC-32 of record_len bytes followed by record
//! ```
//!
//! All integers are little-endian. Trailing bytes after the last record are
//! rejected.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::pack;
use crate::pipeline::QuantizedLayer;

pub const MAGIC: [u8; 4] = *b"CMPQ";
pub const CONTAINER_VERSION: u16 = 1;

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F16,
    F32,
}

impl DType {
    pub const ALL: [DType; 2] = [DType::F16, DType::F32];

    pub fn size(self) -> usize {
        match self {
            DType::F16 => 2,
            DType::F32 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::F32 => "F32",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F16" => Some(DType::F16),
            "F32" => Some(DType::F32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Element type the tensor had on disk (or should be written as).
    pub dtype: DType,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, dtype, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// View a rank-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            &[r, c] => Matrix::from_vec(r, c, self.data.clone()),
            s => Err(Error::Shape(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }
}

/// Named tensors, kept sorted by name so iteration order never depends on
/// the order entries appear in a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorSet {
    entries: BTreeMap<String, TensorEntry>,
}

impl NamedTensorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) -> Option<TensorEntry> {
        self.entries.insert(name.into(), entry)
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Read a safetensors file, widening every tensor to `f32`.
pub fn load_tensors(path: impl AsRef<Path>, allow: &[DType]) -> Result<NamedTensorSet> {
    let bytes = fs::read(path)?;
    parse_safetensors(&bytes, allow)
}

#[derive(Deserialize)]
struct RawHeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub fn parse_safetensors(bytes: &[u8], allow: &[DType]) -> Result<NamedTensorSet> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "file is {} bytes, too short for a safetensors header",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            Error::Format(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::Format(format!("invalid JSON header: {e}")))?;
    let data = &bytes[header_end..];

    let mut set = NamedTensorSet::new();
    let mut covered = 0usize;
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let raw: RawHeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("bad header entry {name:?}: {e}")))?;
        let dtype = DType::parse(&raw.dtype)
            .filter(|d| allow.contains(d))
            .ok_or_else(|| Error::UnsupportedDType {
                name: name.clone(),
                dtype: raw.dtype.clone(),
            })?;
        let [begin, end] = raw.data_offsets;
        let corrupt = |reason: String| Error::CorruptTensor {
            name: name.clone(),
            reason,
        };
        let numel = raw
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("shape {:?} overflows", raw.shape)))?;
        let expected = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| corrupt("byte size overflows".into()))?;
        if end < begin || end - begin != expected {
            return Err(corrupt(format!(
                "offsets [{begin}, {end}) do not match shape {:?} ({expected} bytes)",
                raw.shape
            )));
        }
        if end > data.len() {
            return Err(corrupt(format!(
                "data ends at byte {end} but only {} bytes follow the header",
                data.len()
            )));
        }
        let raw_bytes = &data[begin..end];
        let values: Vec<f32> = match dtype {
            DType::F16 => raw_bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            DType::F32 => raw_bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        };
        covered = covered.max(end);
        set.insert(
            name,
            TensorEntry {
                shape: raw.shape,
                dtype,
                data: values,
            },
        );
    }
    if covered != data.len() {
        return Err(Error::CorruptTensor {
            name: String::new(),
            reason: format!(
                "header describes {covered} data bytes but the file holds {}",
                data.len()
            ),
        });
    }
    Ok(set)
}

/// Serialize a tensor set in safetensors format. Each entry is written with
/// its own `dtype` (values are rounded to half precision for `F16`).
pub fn encode_safetensors(set: &NamedTensorSet) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    let mut payload = Vec::new();
    for (name, entry) in set.iter() {
        let begin = payload.len();
        match entry.dtype {
            DType::F16 => {
                for &v in &entry.data {
                    payload.extend_from_slice(&f16::from_f32(v).to_le_bytes());
                }
            }
            DType::F32 => {
                for &v in &entry.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        header.insert(
            name.to_string(),
            serde_json::json!({
                "dtype": entry.dtype.as_str(),
                "shape": entry.shape,
                "data_offsets": [begin, payload.len()],
            }),
        );
    }
    let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
    // pad so the data section starts 8-byte aligned
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out
}

pub fn save_tensors(path: impl AsRef<Path>, set: &NamedTensorSet) -> Result<()> {
    write_atomic(path.as_ref(), &encode_safetensors(set))
}

/// Global, human-readable metadata stored in every container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMetadata {
    pub tool_version: String,
    /// Requested average bit budget, when the layers were built from one.
    pub bit_budget: Option<f64>,
    pub ratio_act: f64,
    pub ratio_q: f64,
    #[serde(default)]
    pub extra: BTreeMap<String, Value>,
}

impl Default for ContainerMetadata {
    fn default() -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            bit_budget: None,
            ratio_act: 0.0,
            ratio_q: 0.0,
            extra: BTreeMap::new(),
        }
    }
}

/// In-memory form of a CMPQ file.
#[derive(Debug, Clone, PartialEq)]
pub struct CmpqContainer {
    pub version: u16,
    pub metadata: ContainerMetadata,
    pub layers: Vec<QuantizedLayer>,
}

pub fn encode_container(layers: &[QuantizedLayer], metadata: &ContainerMetadata) -> Result<Vec<u8>> {
    if layers.is_empty() {
        return Err(Error::EmptyInput("container needs at least one layer".into()));
    }
    let meta = serde_json::to_vec(metadata)
        .map_err(|e| Error::Format(format!("metadata does not serialize: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    let header_crc = crc32fast::hash(&out);
    out.extend_from_slice(&header_crc.to_le_bytes());

    for layer in layers {
        let record = pack::encode_layer(layer)?;
        let start = out.len();
        out.extend_from_slice(&(record.len() as u64).to_le_bytes());
        out.extend_from_slice(&record);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

pub fn write_container(
    path: impl AsRef<Path>,
    layers: &[QuantizedLayer],
    metadata: &ContainerMetadata,
) -> Result<()> {
    let bytes = encode_container(layers, metadata)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<CmpqContainer> {
    decode_container(&fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated container while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<CmpqContainer> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a CMPQ container".into()));
    }
    let version = cur.u16("version")?;
    if version > CONTAINER_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CONTAINER_VERSION,
        });
    }
    if version == 0 {
        return Err(Error::Format("container version 0 is invalid".into()));
    }
    if cur.u16("reserved")? != 0 {
        return Err(Error::Format("reserved header field is nonzero".into()));
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta = cur.take(meta_len, "metadata")?;
    let layer_count = cur.u32("layer count")?;
    let computed = crc32fast::hash(&bytes[..cur.pos]);
    let stored = cur.u32("header checksum")?;
    if stored != computed {
        return Err(Error::Checksum {
            what: "container header".into(),
            stored,
            computed,
        });
    }
    let metadata: ContainerMetadata = serde_json::from_slice(meta)
        .map_err(|e| Error::Format(format!("invalid metadata: {e}")))?;

    let mut layers = Vec::with_capacity(layer_count.min(1 << 16) as usize);
    for i in 0..layer_count {
        let start = cur.pos;
        let len = cur.u64("record length")?;
        let len = usize::try_from(len)
            .map_err(|_| Error::Format(format!("layer {i} record length {len} too large")))?;
        let record = cur.take(len, "layer record")?;
        let computed = crc32fast::hash(&bytes[start..cur.pos]);
        let stored = cur.u32("layer checksum")?;
        if stored != computed {
            return Err(Error::Checksum {
                what: format!("layer record {i}"),
                stored,
                computed,
            });
        }
        layers.push(pack::decode_layer(record)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last layer record",
            bytes.len() - cur.pos
        )));
    }
    Ok(CmpqContainer {
        version,
        metadata,
        layers,
    })
}

/// Write via a temporary file in the destination directory, then rename, so
/// a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir()?,
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!("{} is not a file path", path.display()))))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(Error::from)
}
