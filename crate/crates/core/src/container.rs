//! Tensor container files.
//!
//! Layout: an 8-byte little-endian `u64` header length `N`, `N` bytes of
//! UTF-8 JSON mapping tensor names to `{dtype, shape, data_offsets}`, then
//! the tightly packed little-endian tensor bytes. Offsets are `[begin, end)`
//! relative to the start of the data section. An optional `__metadata__`
//! entry holds a string-to-string map.
//!
//! The writer emits keys in lexicographic order with offsets assigned in
//! that same order, so identical contents always serialize to identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::f16;
use serde_json::Value;

use crate::error::{FormatError, Result};
use crate::tensor::{DType, Tensor};

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// The JSON header exactly as written by [`TensorFile::to_bytes`].
    pub fn header_json(&self) -> String {
        let mut header = String::from("{");
        let mut first = true;
        let mut push_key = |header: &mut String, key: &str| {
            if !first {
                header.push(',');
            }
            first = false;
            header.push_str(&serde_json::to_string(key).expect("string serializes"));
            header.push(':');
        };
        // "__metadata__" sorts before every lowercase tensor name but not
        // necessarily before all names, so merge it into the ordered walk.
        let mut entries: Vec<(&str, Option<&Tensor>)> = self.tensors.iter().map(|(k, t)| (k.as_str(), Some(t))).collect();
        if !self.metadata.is_empty() {
            entries.push((METADATA_KEY, None));
        }
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut offset = 0usize;
        for (name, tensor) in entries {
            push_key(&mut header, name);
            match tensor {
                Some(t) => {
                    let len = t.numel() * t.dtype().size_bytes();
                    let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                    header.push_str(&format!(
                        "{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
                        t.dtype().tag(),
                        shape.join(","),
                        offset,
                        offset + len
                    ));
                    offset += len;
                }
                None => {
                    let meta: serde_json::Map<String, Value> =
                        self.metadata.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
                    header.push_str(&serde_json::to_string(&meta).expect("map serializes"));
                }
            }
        }
        header.push('}');
        header
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_json();
        let data_len: usize = self.tensors.values().map(|t| t.numel() * t.dtype().size_bytes()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + data_len);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            encode_values(t, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 8 {
            return Err(FormatError::TruncatedPrefix);
        }
        let declared = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if declared > available {
            return Err(FormatError::HeaderOutOfBounds { declared, available });
        }
        let header_end = 8 + declared as usize;
        let header = std::str::from_utf8(&bytes[8..header_end]).map_err(|_| FormatError::HeaderNotUtf8)?;
        let data = &bytes[header_end..];
        let parsed: Value = serde_json::from_str(header).map_err(|e| FormatError::HeaderJson(e.to_string()))?;
        let Value::Object(entries) = parsed else {
            return Err(FormatError::HeaderJson("header must be a JSON object".into()));
        };

        let mut file = TensorFile::new();
        let mut ranges: Vec<(u64, u64, String)> = Vec::new();
        for (name, entry) in entries {
            if name == METADATA_KEY {
                file.metadata = parse_metadata(&entry)?;
                continue;
            }
            let (dtype, shape, begin, end) = parse_entry(&name, &entry)?;
            if begin > end || end > data.len() as u64 {
                return Err(FormatError::OffsetOutOfBounds { name, begin, end, len: data.len() as u64 });
            }
            let numel: usize = shape.iter().product();
            if shape.is_empty() || numel == 0 || (numel * dtype.size_bytes()) as u64 != end - begin {
                return Err(FormatError::SizeMismatch { name, bytes: end - begin, shape, dtype: dtype.tag().to_string() });
            }
            let values = decode_values(&data[begin as usize..end as usize], dtype);
            let tensor = Tensor::new(shape, values).expect("validated shape").with_dtype_unchecked(dtype);
            ranges.push((begin, end, name.clone()));
            file.tensors.insert(name, tensor);
        }
        ranges.sort();
        for pair in ranges.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(FormatError::OverlappingOffsets { name: pair[1].2.clone(), other: pair[0].2.clone() });
            }
        }
        Ok(file)
    }
}

fn parse_metadata(entry: &Value) -> Result<BTreeMap<String, String>, FormatError> {
    let Value::Object(map) = entry else {
        return Err(FormatError::HeaderJson("__metadata__ must be an object".into()));
    };
    map.iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k.clone(), s.clone())),
            _ => Err(FormatError::HeaderJson(format!("metadata value for {k:?} must be a string"))),
        })
        .collect()
}

fn parse_entry(name: &str, entry: &Value) -> Result<(DType, Vec<usize>, u64, u64), FormatError> {
    let bad = |what: &str| FormatError::HeaderJson(format!("tensor {name:?}: {what}"));
    let obj = entry.as_object().ok_or_else(|| bad("entry must be an object"))?;
    let tag = obj.get("dtype").and_then(Value::as_str).ok_or_else(|| bad("missing dtype"))?;
    let dtype = DType::from_tag(tag).ok_or_else(|| FormatError::UnknownDtype(tag.to_string()))?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("shape must hold non-negative integers")))
        .collect::<Result<Vec<_>, _>>()?;
    let offsets = obj.get("data_offsets").and_then(Value::as_array).ok_or_else(|| bad("missing data_offsets"))?;
    if offsets.len() != 2 {
        return Err(bad("data_offsets must have two entries"));
    }
    let begin = offsets[0].as_u64().ok_or_else(|| bad("offsets must be non-negative integers"))?;
    let end = offsets[1].as_u64().ok_or_else(|| bad("offsets must be non-negative integers"))?;
    Ok((dtype, shape, begin, end))
}

fn encode_values(t: &Tensor, out: &mut Vec<u8>) {
    match t.dtype() {
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F16 => t.data().iter().for_each(|v| out.extend_from_slice(&f16::from_f64(*v).to_le_bytes())),
    }
}

fn decode_values(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
        DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
        DType::F16 => bytes.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().expect("2")).to_f64()).collect(),
    }
}
