//! Reader and writer for the tensor container format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u64 N | N bytes of JSON header | raw tensor buffer
//! ```
//!
//! The header maps each tensor name to
//! `{"dtype": "F32"|"F16"|"BF16", "shape": [..], "data_offsets": [begin, end]}`
//! with offsets relative to the start of the buffer, plus an optional
//! `"__metadata__"` object of string values. Offsets must tile the buffer
//! exactly: no overlaps, no gaps, no trailing bytes.
//!
//! Files written here are canonical: tensors appear in lexicographic name
//! order in both the header and the buffer, the header is compact JSON with
//! `__metadata__` first (omitted when empty), and there is no padding. Loading
//! and re-saving a canonical file reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use half::{bf16, f16};
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Real;

pub const METADATA_KEY: &str = "__metadata__";

/// Upper bound on the JSON header size accepted by the reader.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// One named tensor with its raw little-endian payload.
#[derive(Clone, PartialEq, Eq)]
pub struct TensorRecord {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl fmt::Debug for TensorRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TensorRecord")
            .field("name", &self.name)
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("bytes", &self.data.len())
            .finish()
    }
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let name = name.into();
        validate_layout(&name, dtype, &shape, data.len())?;
        Ok(Self {
            name,
            dtype,
            shape,
            data,
        })
    }

    /// Encode `values` into `dtype` with round-to-nearest-even narrowing.
    pub fn from_values<T: Real>(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        values: &[T],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(values.len() * dtype.size());
        match dtype {
            DType::F32 => {
                for &v in values {
                    data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
            DType::F16 => {
                for &v in values {
                    data.extend_from_slice(&f16::from_f64(v.as_f64()).to_le_bytes());
                }
            }
            DType::BF16 => {
                for &v in values {
                    data.extend_from_slice(&bf16::from_f64(v.as_f64()).to_le_bytes());
                }
            }
        }
        Self::new(name, dtype, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len() / self.dtype.size()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Decode every element, widening exactly into `T` (for `T = f64` all
    /// three dtypes are exact; for `f32` too).
    pub fn values<T: Real>(&self) -> Vec<T> {
        match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|b| T::of(f16::from_le_bytes([b[0], b[1]]).to_f64()))
                .collect(),
            DType::BF16 => self
                .data
                .chunks_exact(2)
                .map(|b| T::of(bf16::from_le_bytes([b[0], b[1]]).to_f64()))
                .collect(),
        }
    }

    /// View a rank-2 tensor as a matrix, or a rank-1 tensor of length `n` as
    /// an `n x 1` column.
    pub fn to_matrix<T: Real>(&self) -> Result<Matrix<T>> {
        let (rows, cols) = matrix_dims(&self.name, &self.shape)?;
        Ok(Matrix::from_vec(rows, cols, self.values()))
    }
}

/// Rows and columns for the analysis view of a tensor shape.
pub fn matrix_dims(name: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((n, 1)),
        [m, n] => Ok((m, n)),
        _ => Err(Error::tensor(
            name,
            format!("rank {} tensor cannot be viewed as a matrix", shape.len()),
        )),
    }
}

fn validate_layout(name: &str, dtype: DType, shape: &[usize], byte_len: usize) -> Result<()> {
    if name == METADATA_KEY {
        return Err(Error::tensor(name, "reserved tensor name"));
    }
    if shape.is_empty() {
        return Err(Error::tensor(name, "shape must have rank >= 1"));
    }
    let expected = checked_numel(shape)
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::tensor(name, format!("shape {shape:?} overflows")))?;
    if expected != byte_len {
        return Err(Error::tensor(
            name,
            format!("shape {shape:?} with dtype {dtype} needs {expected} bytes, got {byte_len}"),
        ));
    }
    Ok(())
}

/// Named tensors (in canonical lexicographic order) plus string metadata.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorRecord>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor; fails if the name is already present.
    pub fn insert(&mut self, record: TensorRecord) -> Result<()> {
        if self.tensors.contains_key(record.name()) {
            return Err(Error::tensor(record.name(), "duplicate tensor name"));
        }
        self.tensors.insert(record.name.clone(), record);
        Ok(())
    }

    /// Insert or overwrite a tensor.
    pub fn replace(&mut self, record: TensorRecord) {
        self.tensors.insert(record.name.clone(), record);
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorRecord> {
        self.tensors.values()
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

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(TensorRecord::numel).sum()
    }

    /// Serialize to the canonical byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out).map_err(|e| Error::io("<memory>", e))?;
        Ok(out)
    }

    /// Parse a complete file image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(None, 0, "file shorter than 8-byte header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = bytes.len() as u64 - 8;
        if n > available {
            return Err(Error::format(
                None,
                8,
                format!("header length {n} exceeds remaining {available} bytes"),
            ));
        }
        let data_start = 8 + n as usize;
        let header = Header::parse(&bytes[8..data_start], (bytes.len() - data_start) as u64)?;
        let mut ckpt = Checkpoint {
            tensors: BTreeMap::new(),
            metadata: header.metadata,
        };
        for info in header.tensors.into_values() {
            let span = &bytes[data_start + info.begin as usize..data_start + info.end as usize];
            let rec = TensorRecord::new(info.name, info.dtype, info.shape, span.to_vec())?;
            ckpt.tensors.insert(rec.name.clone(), rec);
        }
        Ok(ckpt)
    }

    fn header_json(&self) -> Result<String> {
        let mut h = String::from("{");
        let mut first = true;
        if !self.metadata.is_empty() {
            h.push_str(&serde_json::to_string(METADATA_KEY)?);
            h.push(':');
            h.push_str(&serde_json::to_string(&self.metadata)?);
            first = false;
        }
        let mut offset = 0usize;
        for rec in self.tensors.values() {
            validate_layout(&rec.name, rec.dtype, &rec.shape, rec.data.len())?;
            if !first {
                h.push(',');
            }
            first = false;
            let end = offset + rec.data.len();
            h.push_str(&serde_json::to_string(&rec.name)?);
            h.push_str(":{\"dtype\":");
            h.push_str(&serde_json::to_string(rec.dtype.as_str())?);
            h.push_str(",\"shape\":");
            h.push_str(&serde_json::to_string(&rec.shape)?);
            h.push_str(&format!(",\"data_offsets\":[{offset},{end}]}}"));
            offset = end;
        }
        h.push('}');
        Ok(h)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = self
            .header_json()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        for rec in self.tensors.values() {
            w.write_all(&rec.data)?;
        }
        Ok(())
    }
}

/// Validated description of one tensor in a file header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Buffer-relative byte range.
    pub begin: u64,
    pub end: u64,
}

#[derive(Debug)]
struct Header {
    tensors: BTreeMap<String, TensorInfo>,
    metadata: BTreeMap<String, String>,
}

/// JSON object entries in document order, keeping duplicates so they can be
/// rejected.
struct RawEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawEntries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(RawEntries(out))
            }
        }

        d.deserialize_map(EntriesVisitor)
    }
}

impl Header {
    /// Parse and validate header bytes against a buffer of `buffer_len`
    /// bytes. Positions in errors are absolute file offsets.
    fn parse(json: &[u8], buffer_len: u64) -> Result<Self> {
        let data_start = 8 + json.len() as u64;
        let raw: RawEntries = serde_json::from_slice(json).map_err(|e| {
            Error::format(
                None,
                8 + json_error_offset(json, &e),
                format!("malformed JSON header: {e}"),
            )
        })?;

        let mut tensors = BTreeMap::new();
        let mut metadata = None;
        for (name, value) in raw.0 {
            if name == METADATA_KEY {
                if metadata.is_some() {
                    return Err(Error::format(None, 8, "duplicate __metadata__ entry"));
                }
                metadata = Some(parse_metadata(value)?);
                continue;
            }
            if tensors.contains_key(&name) {
                return Err(Error::format(Some(&name), 8, "duplicate tensor name"));
            }
            let info = parse_entry(&name, value, data_start)?;
            tensors.insert(name, info);
        }

        let mut spans: Vec<&TensorInfo> = tensors.values().collect();
        spans.sort_by_key(|t| (t.begin, t.end));
        let mut cursor = 0u64;
        for t in spans {
            if t.end > buffer_len {
                return Err(Error::format(
                    Some(&t.name),
                    data_start + buffer_len,
                    format!(
                        "truncated buffer: data_offsets end {} past buffer length {buffer_len}",
                        t.end
                    ),
                ));
            }
            if t.begin < cursor {
                return Err(Error::format(
                    Some(&t.name),
                    data_start + t.begin,
                    format!("overlapping offsets: begins at {} before {cursor}", t.begin),
                ));
            }
            if t.begin > cursor {
                return Err(Error::format(
                    Some(&t.name),
                    data_start + cursor,
                    format!("gap in offsets: bytes {cursor}..{} unused", t.begin),
                ));
            }
            cursor = t.end;
        }
        if cursor != buffer_len {
            return Err(Error::format(
                None,
                data_start + cursor,
                format!("{} trailing bytes not covered by any tensor", buffer_len - cursor),
            ));
        }

        Ok(Header {
            tensors,
            metadata: metadata.unwrap_or_default(),
        })
    }
}

fn json_error_offset(json: &[u8], e: &serde_json::Error) -> u64 {
    // serde_json reports 1-based line/column; convert to a byte offset.
    let (line, col) = (e.line(), e.column());
    if line == 0 {
        return 0;
    }
    let mut offset = 0usize;
    for (i, l) in json.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + col.saturating_sub(1)) as u64;
        }
        offset += l.len() + 1;
    }
    json.len() as u64
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(Error::format(None, 8, "__metadata__ must be an object"));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(Error::format(
                None,
                8,
                format!("__metadata__ value for {k:?} must be a string, got {other}"),
            )),
        })
        .collect()
}

fn parse_entry(name: &str, value: Value, data_start: u64) -> Result<TensorInfo> {
    let bad = |msg: String| Error::format(Some(name), 8, msg);
    let Value::Object(mut obj) = value else {
        return Err(bad("entry must be an object".into()));
    };
    if let Some(extra) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "dtype" | "shape" | "data_offsets"))
    {
        return Err(bad(format!("unexpected field {extra:?}")));
    }
    let dtype = match obj.remove("dtype") {
        Some(Value::String(s)) => DType::parse(&s).ok_or_else(|| bad(format!("unknown dtype {s:?}")))?,
        _ => return Err(bad("missing or non-string dtype".into())),
    };
    let shape = match obj.remove("shape") {
        Some(Value::Array(dims)) => dims
            .iter()
            .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| bad("shape must be non-negative integers".into()))?,
        _ => return Err(bad("missing shape".into())),
    };
    if shape.is_empty() {
        return Err(bad("shape must have rank >= 1".into()));
    }
    let (begin, end) = match obj.remove("data_offsets") {
        Some(Value::Array(o)) if o.len() == 2 => match (o[0].as_u64(), o[1].as_u64()) {
            (Some(b), Some(e)) => (b, e),
            _ => return Err(bad("data_offsets must be non-negative integers".into())),
        },
        _ => return Err(bad("data_offsets must be [begin, end]".into())),
    };
    if begin > end {
        return Err(Error::format(
            Some(name),
            data_start + begin,
            format!("data_offsets begin {begin} > end {end}"),
        ));
    }
    let expected = checked_numel(&shape)
        .and_then(|n| (n as u64).checked_mul(dtype.size() as u64))
        .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
    if end - begin != expected {
        return Err(Error::format(
            Some(name),
            data_start + begin,
            format!(
                "byte span {} does not match shape {shape:?} x {dtype} = {expected} bytes",
                end - begin
            ),
        ));
    }
    Ok(TensorInfo {
        name: name.to_owned(),
        dtype,
        shape,
        begin,
        end,
    })
}

/// Random-access reader that parses the header up front and materializes
/// tensors one at a time.
pub struct CheckpointReader {
    path: PathBuf,
    file: Mutex<File>,
    data_start: u64,
    header: Header,
}

impl CheckpointReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if file_len < 8 {
            return Err(Error::format(None, 0, "file shorter than 8-byte header length"));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(|e| Error::io(&path, e))?;
        let n = u64::from_le_bytes(len_bytes);
        if n > file_len - 8 {
            return Err(Error::format(
                None,
                8,
                format!("header length {n} exceeds remaining {} bytes", file_len - 8),
            ));
        }
        if n > MAX_HEADER_LEN {
            return Err(Error::format(None, 0, format!("header length {n} too large")));
        }
        let mut json = vec![0u8; n as usize];
        file.read_exact(&mut json).map_err(|e| Error::io(&path, e))?;
        let data_start = 8 + n;
        let header = Header::parse(&json, file_len - data_start)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
            data_start,
            header,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.header.tensors.keys().map(String::as_str)
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.header.tensors.get(name)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.header.metadata
    }

    pub fn read(&self, name: &str) -> Result<TensorRecord> {
        let info = self.info(name).ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        let mut buf = vec![0u8; (info.end - info.begin) as usize];
        {
            let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
            f.seek(SeekFrom::Start(self.data_start + info.begin))
                .and_then(|_| f.read_exact(&mut buf))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        TensorRecord::new(info.name.clone(), info.dtype, info.shape.clone(), buf)
    }

    pub fn load_all(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.metadata = self.header.metadata.clone();
        for name in self.header.tensors.keys() {
            ckpt.insert(self.read(name)?)?;
        }
        Ok(ckpt)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    CheckpointReader::open(path)?.load_all()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Validate before touching the filesystem.
    ckpt.header_json()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    ckpt.write_to(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_file(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn minimal_file() {
        let data: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = raw_file(r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#, &data);
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.len(), 1);
        let w = ckpt.get("w").unwrap();
        assert_eq!(w.shape(), &[2, 2]);
        let m = w.to_matrix::<f64>().unwrap();
        assert_eq!(m[(1, 0)], 3.0);
        assert_eq!(ckpt.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let header = r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]},"b":{"dtype":"F32","shape":[4],"data_offsets":[8,24]}}"#;
        let err = Checkpoint::from_bytes(&raw_file(header, &[0u8; 24])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("overlapping offsets"), "{msg}");
        assert!(msg.contains("\"b\""), "{msg}");
        let Error::Format { position, .. } = err else { panic!() };
        assert_eq!(position, 8 + header.len() as u64 + 8);
    }

    #[test]
    fn gaps_truncation_and_trailing_bytes_rejected() {
        let gap = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert!(Checkpoint::from_bytes(&raw_file(gap, &[0u8; 8]))
            .unwrap_err()
            .to_string()
            .contains("gap"));
        let trunc = r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#;
        assert!(Checkpoint::from_bytes(&raw_file(trunc, &[0u8; 12]))
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(Checkpoint::from_bytes(&raw_file(trunc, &[0u8; 20]))
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }

    #[test]
    fn unknown_dtype_and_bad_json_rejected() {
        let h = r#"{"a":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}}"#;
        let msg = Checkpoint::from_bytes(&raw_file(h, &[0u8; 1])).unwrap_err().to_string();
        assert!(msg.contains("unknown dtype") && msg.contains("\"a\""), "{msg}");
        assert!(Checkpoint::from_bytes(&raw_file("{\"a\":", &[]))
            .unwrap_err()
            .to_string()
            .contains("malformed JSON"));
        let dup = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        assert!(Checkpoint::from_bytes(&raw_file(dup, &[0u8; 8]))
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    #[test]
    fn shape_span_mismatch_rejected() {
        let h = r#"{"a":{"dtype":"F16","shape":[3],"data_offsets":[0,4]}}"#;
        assert!(Checkpoint::from_bytes(&raw_file(h, &[0u8; 4])).is_err());
        let rank0 = r#"{"a":{"dtype":"F32","shape":[],"data_offsets":[0,4]}}"#;
        assert!(Checkpoint::from_bytes(&raw_file(rank0, &[0u8; 4])).is_err());
    }

    #[test]
    fn empty_checkpoint_writes_braces() {
        let bytes = Checkpoint::new().to_bytes().unwrap();
        assert_eq!(bytes, raw_file("{}", &[]));
        assert!(Checkpoint::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn canonical_order_and_contiguous_offsets() {
        let mut c = Checkpoint::new();
        c.insert(TensorRecord::from_values("b", DType::F32, vec![3], &[1.0f64, 2.0, 3.0]).unwrap())
            .unwrap();
        c.insert(TensorRecord::from_values("a", DType::F16, vec![2], &[1.0f64, 2.0]).unwrap())
            .unwrap();
        let bytes = c.to_bytes().unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        assert_eq!(
            header,
            r#"{"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[3],"data_offsets":[4,16]}}"#
        );
    }

    #[test]
    fn metadata_roundtrip() {
        let mut c = Checkpoint::new();
        c.set_metadata("kind", "tuning_vector");
        c.insert(TensorRecord::new("z", DType::BF16, vec![0], vec![]).unwrap())
            .unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn reserved_name_rejected() {
        assert!(TensorRecord::new(METADATA_KEY, DType::F32, vec![1], vec![0; 4]).is_err());
    }

    #[test]
    fn analysis_view() {
        let one_f16 = TensorRecord::new("h", DType::F16, vec![1], f16::ONE.to_le_bytes().to_vec()).unwrap();
        assert_eq!(one_f16.values::<f64>(), vec![1.0]);
        let bf = TensorRecord::new("b", DType::BF16, vec![1], 0x3F80u16.to_le_bytes().to_vec()).unwrap();
        assert_eq!(bf.values::<f64>(), vec![1.0]);
        let v = TensorRecord::from_values("v", DType::F32, vec![3], &[1.0f64, 2.0, 3.0]).unwrap();
        assert_eq!(v.to_matrix::<f64>().unwrap().shape(), (3, 1));
        let t3 = TensorRecord::from_values("t", DType::F32, vec![1, 1, 1], &[1.0f64]).unwrap();
        assert!(t3.to_matrix::<f64>().is_err());
    }

    #[test]
    fn file_roundtrip_through_reader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut c = Checkpoint::new();
        c.insert(TensorRecord::from_values("x", DType::F32, vec![2, 2], &[1.0f64, -2.0, 3.5, 0.0]).unwrap())
            .unwrap();
        save_checkpoint(&c, &p).unwrap();
        let r = CheckpointReader::open(&p).unwrap();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["x"]);
        assert_eq!(r.read("x").unwrap(), *c.get("x").unwrap());
        assert_eq!(load_checkpoint(&p).unwrap(), c);
        assert!(matches!(r.read("nope"), Err(Error::MissingTensor(_))));
    }
}
