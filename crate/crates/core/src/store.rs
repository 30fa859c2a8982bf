//! The `MOEL` checkpoint container.
//!
//! Layout: magic `MOEL` | version `u32` LE | header length `u64` LE | UTF-8
//! JSON header | data section. The header carries the model config under
//! `__config__` and one entry per tensor with `dtype`, `shape` and
//! `offsets` (`[start, end)` relative to the data section). Tensors are
//! little-endian row-major `f32`.
//!
//! Writers lay tensors out in lexicographic name order so the same tensors
//! always produce the same bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 4] = b"MOEL";
pub const VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
        }
    }

    pub fn size(self) -> usize {
        4
    }
}

/// An owned tensor used when building checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Rounds a 2-D `f64` matrix to `f32`.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_range: Range<u64>,
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A validated, immutable checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
    data: Vec<u8>,
}

/// Read-only row-major view into one tensor of a checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct TensorView<'a> {
    pub name: &'a str,
    pub shape: &'a [usize],
    bytes: &'a [u8],
}

impl<'a> TensorView<'a> {
    pub fn len(&self) -> usize {
        self.bytes.len() / 4
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Element at a flat row-major index.
    pub fn get(&self, i: usize) -> f32 {
        let b = &self.bytes[4 * i..4 * i + 4];
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }

    /// Element at a multi-dimensional index.
    pub fn at(&self, index: &[usize]) -> Result<f32> {
        if index.len() != self.shape.len() {
            return Err(Error::DimensionMismatch {
                expected: self.shape.len(),
                actual: index.len(),
            });
        }
        let mut flat = 0;
        for (&i, &dim) in index.iter().zip(self.shape) {
            if i >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: i,
                });
            }
            flat = flat * dim + i;
        }
        Ok(self.get(flat))
    }

    pub fn iter(&self) -> impl Iterator<Item = f32> + 'a {
        self.bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.to_vec(),
            data: self.iter().collect(),
        }
    }

    /// Widens a 2-D tensor to an `f64` matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                actual: self.shape.len(),
            });
        }
        Matrix::from_vec(
            self.shape[0],
            self.shape[1],
            self.iter().map(f64::from).collect(),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct RawMeta {
    dtype: String,
    shape: Vec<usize>,
    offsets: [u64; 2],
}

#[derive(Serialize)]
struct HeaderOut<'a> {
    #[serde(rename = "__config__")]
    config: &'a ModelConfig,
    tensors: BTreeMap<&'a str, RawMeta>,
}

#[derive(Deserialize)]
struct HeaderIn {
    #[serde(rename = "__config__")]
    config: ModelConfig,
    tensors: OrderedEntries,
}

/// JSON object kept as an ordered list so duplicate keys are detectable.
struct OrderedEntries(Vec<(String, RawMeta)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, RawMeta>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

impl Checkpoint {
    /// Builds a checkpoint from named tensors, checking that the map holds
    /// exactly the tensors `config` requires.
    pub fn from_tensors(config: ModelConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        check_coverage(
            &config,
            tensors
                .iter()
                .map(|(name, t)| (name.as_str(), t.shape.as_slice())),
        )?;
        for (name, t) in tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape.clone(),
                    actual: vec![t.data.len()],
                });
            }
        }

        let total: usize = tensors.values().map(|t| t.data.len() * 4).sum();
        let mut data = Vec::with_capacity(total);
        let mut metas = Vec::with_capacity(tensors.len());
        for (name, t) in tensors {
            let start = data.len() as u64;
            for v in &t.data {
                data.extend_from_slice(&v.to_le_bytes());
            }
            metas.push(TensorMeta {
                name: name.clone(),
                dtype: DType::F32,
                shape: t.shape.clone(),
                byte_range: start..data.len() as u64,
            });
        }
        Ok(Self {
            config,
            tensors: metas,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorMeta] {
        &self.tensors
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get_tensor(&self, name: &str) -> Result<TensorView<'_>> {
        let meta = self
            .tensors
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        let r = meta.byte_range.start as usize..meta.byte_range.end as usize;
        Ok(TensorView {
            name: &meta.name,
            shape: &meta.shape,
            bytes: &self.data[r],
        })
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get_tensor(name)?.to_matrix()
    }

    /// Copies every tensor out, e.g. to build a modified checkpoint.
    pub fn to_tensor_map(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|m| {
                let view = self
                    .get_tensor(&m.name)
                    .expect("meta comes from this checkpoint");
                (m.name.clone(), view.to_tensor())
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = HeaderOut {
            config: &self.config,
            tensors: self
                .tensors
                .iter()
                .map(|m| {
                    (
                        m.name.as_str(),
                        RawMeta {
                            dtype: m.dtype.as_str().to_string(),
                            shape: m.shape.clone(),
                            offsets: [m.byte_range.start, m.byte_range.end],
                        },
                    )
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < PREAMBLE_LEN {
            return Err(Error::MalformedHeader("truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE_LEN as u64)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::MalformedHeader(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;
        let header: HeaderIn = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        header.config.validate()?;
        let payload = &bytes[header_end..];

        let mut seen = HashSet::new();
        let mut metas = Vec::with_capacity(header.tensors.0.len());
        for (name, raw) in header.tensors.0 {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateTensor(name));
            }
            if raw.dtype != "f32" {
                return Err(Error::UnsupportedDtype {
                    name,
                    dtype: raw.dtype,
                });
            }
            let [start, end] = raw.offsets;
            let numel = raw.shape.iter().try_fold(1u64, |acc, &d| {
                (d > 0).then(|| acc.checked_mul(d as u64)).flatten()
            });
            let expected_len = numel.and_then(|n| n.checked_mul(4));
            if start > end || expected_len != Some(end - start) {
                return Err(Error::RangeShapeMismatch { name, start, end });
            }
            metas.push(TensorMeta {
                name,
                dtype: DType::F32,
                shape: raw.shape,
                byte_range: start..end,
            });
        }

        let mut by_start: Vec<&TensorMeta> = metas.iter().collect();
        by_start.sort_by_key(|m| (m.byte_range.start, m.byte_range.end));
        for w in by_start.windows(2) {
            if w[1].byte_range.start < w[0].byte_range.end {
                return Err(Error::OverlappingRanges(
                    w[0].name.clone(),
                    w[1].name.clone(),
                ));
            }
        }
        let max_end = metas.iter().map(|m| m.byte_range.end).max().unwrap_or(0);
        if max_end != payload.len() as u64 {
            return Err(Error::PayloadLength {
                expected: max_end,
                actual: payload.len() as u64,
            });
        }

        check_coverage(
            &header.config,
            metas.iter().map(|m| (m.name.as_str(), m.shape.as_slice())),
        )?;

        Ok(Self {
            config: header.config,
            tensors: metas,
            data: payload.to_vec(),
        })
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn check_coverage<'a>(
    config: &ModelConfig,
    present: impl Iterator<Item = (&'a str, &'a [usize])>,
) -> Result<()> {
    let required: BTreeMap<String, Vec<usize>> = config.required_tensors().into_iter().collect();
    let mut found = HashSet::new();
    for (name, shape) in present {
        match required.get(name) {
            None => return Err(Error::UnexpectedTensor(name.to_string())),
            Some(expected) if expected.as_slice() != shape => {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: expected.clone(),
                    actual: shape.to_vec(),
                })
            }
            Some(_) => {
                found.insert(name.to_string());
            }
        }
    }
    if let Some(missing) = required.keys().find(|k| !found.contains(*k)) {
        return Err(Error::MissingTensor(missing.clone()));
    }
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_checkpoint(
    config: ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
    path: impl AsRef<Path>,
) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_tensors(config, tensors)?;
    ckpt.write(path)?;
    Ok(ckpt)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
