//! Single-file model container.
//!
//! ```text
//! "LEMN" | version: u32 LE (= 1) | header_len: u64 LE | header JSON | payload
//! ```
//!
//! The header JSON holds the [`ModelSpec`], a tensor table of
//! `{name, dtype, shape, byte_offset, byte_length}` and, for expanded models,
//! the duplicate map of replicated units. Offsets are absolute and 64-byte
//! aligned; the header is space-padded so the payload starts aligned. Tensor
//! data is row-major little-endian.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expander::DuplicateMap;
use crate::model::{ModelSpec, ModelWeights};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LEMN";
pub const VERSION: u32 = 1;
pub const ALIGN: u64 = 64;
const PREFIX: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<DuplicateMap>,
}

/// A violated container invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    Overlap { first: String, second: String },
    Misaligned { name: String, offset: u64 },
    LengthMismatch { name: String, expected: u64, actual: u64 },
    DuplicateName { name: String },
    /// Tensor starts inside the header.
    InsideHeader { name: String, offset: u64 },
    OutOfBounds { name: String, end: u64, file_len: u64 },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::Overlap { first, second } => write!(f, "tensors {first} and {second} overlap"),
            Diagnostic::Misaligned { name, offset } => {
                write!(f, "tensor {name} at offset {offset} is not {ALIGN}-byte aligned")
            }
            Diagnostic::LengthMismatch { name, expected, actual } => {
                write!(f, "tensor {name} has byte_length {actual}, shape implies {expected}")
            }
            Diagnostic::DuplicateName { name } => write!(f, "tensor name {name} appears more than once"),
            Diagnostic::InsideHeader { name, offset } => {
                write!(f, "tensor {name} at offset {offset} starts inside the header")
            }
            Diagnostic::OutOfBounds { name, end, file_len } => {
                write!(f, "tensor {name} ends at {end}, past the end of the {file_len}-byte file")
            }
        }
    }
}

/// Weights in whichever precision the file stores.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyWeights {
    F32(ModelWeights<f32>),
    F64(ModelWeights<f64>),
}

impl AnyWeights {
    pub fn dtype(&self) -> DType {
        match self {
            AnyWeights::F32(_) => DType::F32,
            AnyWeights::F64(_) => DType::F64,
        }
    }

    /// Exact upcast (or clone) to `f64`.
    pub fn to_f64(&self) -> ModelWeights<f64> {
        match self {
            AnyWeights::F32(w) => w.cast(),
            AnyWeights::F64(w) => w.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub weights: AnyWeights,
    pub expansion: Option<DuplicateMap>,
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

/// Serialises `w` into container bytes.
pub fn encode_checkpoint<T: Scalar>(
    w: &ModelWeights<T>,
    spec: &ModelSpec,
    expansion: Option<&DuplicateMap>,
) -> Result<Vec<u8>> {
    w.check(spec)?;
    let named = w.to_named();
    let layout = |data_start: u64| -> (Vec<TensorEntry>, u64) {
        let mut off = data_start;
        let entries = named
            .iter()
            .map(|(name, t)| {
                let len = (t.len() * T::DTYPE.size()) as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: T::DTYPE,
                    shape: t.shape().to_vec(),
                    byte_offset: off,
                    byte_length: len,
                };
                off = align_up(off + len);
                e
            })
            .collect();
        (entries, off)
    };
    // Offsets depend on the header length and vice versa; grow the data start
    // until the header fits in front of it.
    let mut data_start = align_up(PREFIX as u64);
    let (json, end) = loop {
        let (tensors, end) = layout(data_start);
        let header = Header {
            spec: spec.clone(),
            tensors,
            expansion: expansion.cloned(),
        };
        let json = serde_json::to_vec(&header)?;
        if (PREFIX + json.len()) as u64 <= data_start {
            break (json, end);
        }
        data_start = align_up((PREFIX + json.len()) as u64);
    };
    let header_len = data_start as usize - PREFIX;
    let mut out = Vec::with_capacity(end as usize);
    let (tensors, _) = layout(data_start);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_len as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(data_start as usize, b' ');
    for ((_, t), e) in named.iter().zip(&tensors) {
        out.resize(e.byte_offset as usize, 0);
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn write_checkpoint<T: Scalar>(w: &ModelWeights<T>, spec: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint_with_map(w, spec, None, path)
}

pub fn write_checkpoint_with_map<T: Scalar>(
    w: &ModelWeights<T>,
    spec: &ModelSpec,
    expansion: Option<&DuplicateMap>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_checkpoint(w, spec, expansion)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parses the fixed prefix and header JSON from the start of a file.
///
/// `bytes` must contain at least the prefix and the header; the payload is
/// not needed. Returns the header and the payload start offset.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, u64)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PREFIX {
        return Err(Error::TruncatedPayload(format!("{}-byte file has no complete prefix", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = (PREFIX as u64)
        .checked_add(header_len)
        .ok_or_else(|| Error::MalformedTable(format!("header length {header_len} overflows")))?;
    if end > bytes.len() as u64 {
        return Err(Error::TruncatedPayload(format!(
            "header of {header_len} bytes does not fit in {} bytes",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX..end as usize])
        .map_err(|e| Error::MalformedTable(format!("header JSON: {e}")))?;
    Ok((header, end))
}

/// Every invariant the tensor table violates, given where the payload
/// starts and how long the file is.
pub fn header_diagnostics(header: &Header, data_start: u64, file_len: u64) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut seen = HashSet::new();
    for e in &header.tensors {
        if !seen.insert(e.name.as_str()) {
            diags.push(Diagnostic::DuplicateName { name: e.name.clone() });
        }
        let expected = e
            .shape
            .iter()
            .try_fold(e.dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64));
        if expected != Some(e.byte_length) {
            diags.push(Diagnostic::LengthMismatch {
                name: e.name.clone(),
                expected: expected.unwrap_or(u64::MAX),
                actual: e.byte_length,
            });
        }
        if e.byte_offset % ALIGN != 0 {
            diags.push(Diagnostic::Misaligned {
                name: e.name.clone(),
                offset: e.byte_offset,
            });
        }
        if e.byte_offset < data_start {
            diags.push(Diagnostic::InsideHeader {
                name: e.name.clone(),
                offset: e.byte_offset,
            });
        }
        match e.byte_offset.checked_add(e.byte_length) {
            Some(end) if end <= file_len => {}
            end => diags.push(Diagnostic::OutOfBounds {
                name: e.name.clone(),
                end: end.unwrap_or(u64::MAX),
                file_len,
            }),
        }
    }
    let mut spans: Vec<&TensorEntry> = header.tensors.iter().filter(|e| e.byte_length > 0).collect();
    spans.sort_by_key(|e| e.byte_offset);
    for pair in spans.windows(2) {
        if pair[0].byte_offset.saturating_add(pair[0].byte_length) > pair[1].byte_offset {
            diags.push(Diagnostic::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    diags
}

/// Checks the framing and every table invariant without touching the
/// payload. `bytes` needs only the prefix and header; `file_len` is the full
/// file size.
///
/// A table that only runs past the end of the file is reported as a
/// truncated payload; any other violation as [`Error::InvalidHeader`].
pub fn validate_header(bytes: &[u8], file_len: u64) -> Result<Header> {
    let (header, data_start) = parse_header(bytes)?;
    let diags = header_diagnostics(&header, data_start, file_len);
    if diags.is_empty() {
        return Ok(header);
    }
    if diags.iter().all(|d| matches!(d, Diagnostic::OutOfBounds { .. })) {
        return Err(Error::TruncatedPayload(diags[0].to_string()));
    }
    Err(Error::InvalidHeader(diags))
}

fn load<T: Scalar>(header: &Header, bytes: &[u8]) -> Result<ModelWeights<T>> {
    let mut named = BTreeMap::new();
    for e in &header.tensors {
        if e.dtype != T::DTYPE {
            return Err(Error::MalformedTable(format!(
                "tensor {} is {}, file is {}",
                e.name,
                e.dtype.as_str(),
                T::DTYPE.as_str()
            )));
        }
        let raw = &bytes[e.byte_offset as usize..(e.byte_offset + e.byte_length) as usize];
        let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        named.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    ModelWeights::from_named(&header.spec, named).map_err(|e| match e {
        Error::InconsistentWeights(m) | Error::InvalidSpec(m) => Error::MalformedTable(m),
        other => other,
    })
}

/// Decodes a whole container held in memory.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let header = validate_header(bytes, bytes.len() as u64)?;
    let dtype = header.tensors.first().map(|e| e.dtype).unwrap_or(DType::F64);
    let weights = match dtype {
        DType::F32 => AnyWeights::F32(load(&header, bytes)?),
        DType::F64 => AnyWeights::F64(load(&header, bytes)?),
    };
    Ok(Checkpoint {
        spec: header.spec,
        weights,
        expansion: header.expansion,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Reads only the prefix and header of a container file, validating the
/// table against the file size.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let file_len = f.metadata()?.len();
    let mut prefix = [0u8; PREFIX];
    let got = read_up_to(&mut f, &mut prefix)?;
    if got < PREFIX {
        return validate_header(&prefix[..got], file_len);
    }
    let header_len = u64::from_le_bytes(prefix[8..16].try_into().expect("8 bytes"));
    let want = header_len.min(file_len.saturating_sub(PREFIX as u64)) as usize;
    let mut buf = prefix.to_vec();
    buf.resize(PREFIX + want, 0);
    f.read_exact(&mut buf[PREFIX..])?;
    validate_header(&buf, file_len)
}

fn read_up_to(f: &mut std::fs::File, buf: &mut [u8]) -> Result<usize> {
    use std::io::Read;
    let mut n = 0;
    while n < buf.len() {
        match f.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Parses a JSON config file (model spec, expansion plan, schedule).
pub fn read_json<C: DeserializeOwned>(path: impl AsRef<Path>) -> Result<C> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
