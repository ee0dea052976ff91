//! `INFD` checkpoints.
//!
//! Layout: magic `INFD`, `u32` LE format version, `u64` LE header length,
//! UTF-8 header, payload. Header lines:
//!
//! ```text
//! config {"layers":4,...}
//! meta <key> <value>
//! tensor <name> <f32|f64> <d0,d1,..> <payload byte offset>
//! ```
//!
//! Tensor data is raw little-endian in the stored dtype.

use std::collections::BTreeMap;
use std::path::Path;

use tiledit_core::model::{Model, ModelConfig, ModelParams};
use tiledit_core::{Scalar, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"INFD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn of<T: Scalar>() -> Self {
        if T::BYTES == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(Error::malformed("checkpoint", format!("unknown dtype {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Entry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.bytes()
    }
}

/// A parsed checkpoint whose tensors are decoded on demand.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
    payload: Vec<u8>,
}

pub fn encode<'a, T: Scalar>(
    config: &ModelConfig,
    tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
    meta: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let cfg_json = serde_json::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut header = format!("config {cfg_json}\n");
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::malformed("checkpoint", format!("meta key {k:?} not representable")));
        }
        header.push_str(&format!("meta {k} {v}\n"));
    }
    let dtype = Dtype::of::<T>();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {} {} {}\n", dtype.name(), dims.join(","), payload.len()));
        for &v in t.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
    }
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::malformed("checkpoint", "missing INFD magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| Error::malformed("checkpoint", "truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|_| Error::malformed("checkpoint", "header is not UTF-8"))?;
        let payload = bytes[16 + hlen..].to_vec();

        let mut config = None;
        let mut meta = BTreeMap::new();
        let mut entries: Vec<Entry> = Vec::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "config" => {
                    config = Some(
                        serde_json::from_str::<ModelConfig>(rest)
                            .map_err(|e| Error::malformed("checkpoint", format!("config: {e}")))?,
                    )
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => entries.push(parse_entry(rest)?),
                _ => return Err(Error::malformed("checkpoint", format!("unknown header line {line:?}"))),
            }
        }
        let config = config.ok_or_else(|| Error::malformed("checkpoint", "header has no config line"))?;

        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::malformed("checkpoint", format!("tensor `{}` listed twice", e.name)));
            }
            if e.offset.checked_add(e.byte_len()).is_none_or(|end| end > payload.len()) {
                return Err(Error::TruncatedTensor(e.name.clone()));
            }
        }
        let mut spans: Vec<(usize, usize, &str)> =
            entries.iter().map(|e| (e.offset, e.offset + e.byte_len(), e.name.as_str())).collect();
        spans.sort();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::malformed("checkpoint", format!("tensors `{}` and `{}` overlap", pair[0].2, pair[1].2)));
            }
        }
        Ok(Self { config, meta, entries, payload })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Decodes one tensor, converting to `T` if stored in the other dtype.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let raw = &self.payload[e.offset..e.offset + e.byte_len()];
        let data: Vec<T> = match e.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        Ok(Tensor::new(&e.shape, data)?)
    }

    /// Model parameters, after checking the stored config against
    /// `expected` and every parameter's presence and shape.
    pub fn model<T: Scalar>(&self, expected: Option<&ModelConfig>) -> Result<Model<T>> {
        if let Some(exp) = expected {
            if exp != &self.config {
                return Err(Error::ConfigMismatch(format!(
                    "stored {}, requested {}",
                    serde_json::to_string(&self.config).unwrap_or_default(),
                    serde_json::to_string(exp).unwrap_or_default()
                )));
            }
        }
        let mut params = ModelParams::<T>::init(&self.config, 0)?;
        self.fill(&mut params, "")?;
        Ok(Model::new(self.config, params)?)
    }

    /// Fills every tensor of `params` from entries named `prefix + name`.
    pub fn fill<T: Scalar>(&self, params: &mut ModelParams<T>, prefix: &str) -> Result<()> {
        for (name, slot) in params.tensors_mut() {
            let full = format!("{prefix}{name}");
            let t = self.tensor::<T>(&full)?;
            if t.shape() != slot.shape() {
                return Err(Error::TensorShape { name: full, found: t.shape().to_vec(), expected: slot.shape().to_vec() });
            }
            *slot = t;
        }
        Ok(())
    }
}

fn parse_entry(rest: &str) -> Result<Entry> {
    let parts: Vec<&str> = rest.split(' ').collect();
    if parts.len() != 4 {
        return Err(Error::malformed("checkpoint", format!("bad tensor line {rest:?}")));
    }
    let bad = |what: &str| Error::malformed("checkpoint", format!("bad {what} for tensor `{}`", parts[0]));
    let shape = if parts[2].is_empty() {
        Vec::new()
    } else {
        parts[2]
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|_| bad("shape")))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Entry {
        name: parts[0].to_string(),
        dtype: Dtype::parse(parts[1])?,
        shape,
        offset: parts[3].parse().map_err(|_| bad("offset"))?,
    })
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(&model.cfg, model.params.tensors(), &BTreeMap::new())?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Model<T>> {
    Checkpoint::read(path)?.model(expected)
}
