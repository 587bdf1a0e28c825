//! Binary containers for tensors and checkpoints.
//!
//! Tensor file (`.tdae`), all integers little-endian:
//!
//! | bytes        | field                                  |
//! |--------------|----------------------------------------|
//! | 4            | magic `TDAE`                           |
//! | 1            | version, currently 1                   |
//! | 1            | dtype: 1 = f32, 2 = f64, 3 = u8        |
//! | 1            | rank                                   |
//! | 8 * rank     | dims as u64                            |
//! | rest         | row-major payload                      |
//!
//! Checkpoint: magic `TDCK`, version byte, u64 header length, a JSON header,
//! then zero or more blocks of `u32 name length, name, u64 length, tensor file`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use transdae_tensor::{Precision, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::model::{Model, ModelConfig};
use crate::nn::ModelParams;
use crate::train::{EpochLog, TrainingState};

pub const TENSOR_MAGIC: [u8; 4] = *b"TDAE";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TDCK";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            3 => Ok(DType::U8),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoded contents of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl TensorFile {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let payload = match T::PRECISION {
            Precision::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            Precision::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        TensorFile {
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn from_mask(m: &LabelMask) -> Self {
        TensorFile {
            shape: m.shape().to_vec(),
            payload: Payload::U8(m.data().to_vec()),
        }
    }

    /// Requires the stored dtype to match `T` exactly.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.payload, T::PRECISION) {
            (Payload::F32(v), Precision::F32) => v.iter().map(|&x| T::from_f64(f64::from(x))).collect(),
            (Payload::F64(v), Precision::F64) => v.iter().map(|&x| T::from_f64(x)).collect(),
            (p, want) => {
                return Err(Error::Contract(format!(
                    "stored dtype {:?} cannot be read as {want:?}",
                    p.dtype()
                )))
            }
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }

    /// Any floating dtype, converted to `T`.
    pub fn to_tensor_lossy<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| T::from_f64(f64::from(x))).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            Payload::U8(_) => {
                return Err(Error::Contract("u8 labels are not a real-valued tensor".into()))
            }
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }

    pub fn to_mask(&self) -> Result<LabelMask> {
        match &self.payload {
            Payload::U8(v) => LabelMask::new(self.shape.clone(), v.clone()),
            p => Err(Error::Contract(format!(
                "expected u8 labels, found {:?}",
                p.dtype()
            ))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let rank = u8::try_from(self.shape.len())
            .map_err(|_| Error::Format(format!("rank {} exceeds 255", self.shape.len())))?;
        let numel: usize = self.shape.iter().product();
        if numel != self.payload.len() {
            return Err(Error::Contract(format!(
                "shape {:?} needs {numel} values, payload has {}",
                self.shape,
                self.payload.len()
            )));
        }
        let dtype = self.payload.dtype();
        let mut out = Vec::with_capacity(7 + 8 * self.shape.len() + numel * dtype.size());
        out.extend_from_slice(&TENSOR_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(dtype as u8);
        out.push(rank);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.array()?;
        if magic != TENSOR_MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: TENSOR_MAGIC,
            });
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dtype = DType::from_code(r.u8()?)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64()?;
            let d = usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
            if d == 0 {
                return Err(Error::Format("zero-sized dimension".into()));
            }
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let body = r.take(numel * dtype.size())?;
        let payload = match dtype {
            DType::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U8 => Payload::U8(body.to_vec()),
        };
        if r.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                r.remaining()
            )));
        }
        Ok(TensorFile { shape, payload })
    }
}

pub fn write_tensor_file(path: &Path, file: &TensorFile) -> Result<()> {
    Ok(fs::write(path, file.encode()?)?)
}

pub fn read_tensor_file(path: &Path) -> Result<TensorFile> {
    TensorFile::decode(&fs::read(path)?)
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_tensor_file(path, &TensorFile::from_tensor(t))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    read_tensor_file(path)?.to_tensor()
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    write_tensor_file(path, &TensorFile::from_mask(m))
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    read_tensor_file(path)?.to_mask()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                needed: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

/// JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// `"f32"` or `"f64"`.
    pub precision: String,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub history: Vec<EpochLog>,
    /// Present when the checkpoint can resume training.
    #[serde(default)]
    pub training: Option<TrainingState>,
}

pub fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

/// Parameters plus optional optimizer slots (e.g. momentum buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub params: ModelParams<T>,
    pub optimizer: ModelParams<T>,
}

const OPTIMIZER_PREFIX: &str = "optim:";

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: &Model<T>, epoch: usize, seed: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                config: model.config.clone(),
                precision: precision_name(T::PRECISION).into(),
                epoch,
                seed,
                history: Vec::new(),
                training: None,
            },
            params: model.params.clone(),
            optimizer: ModelParams::new(),
        }
    }

    pub fn model(&self) -> Result<Model<T>> {
        Model::from_parts(self.header.config.clone(), self.params.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let blocks = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .chain(self.optimizer.iter().map(|(n, t)| (format!("{OPTIMIZER_PREFIX}{n}"), t)));
        for (name, t) in blocks {
            let body = TensorFile::from_tensor(t).encode()?;
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.array()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: CHECKPOINT_MAGIC,
            });
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
        let want = precision_name(T::PRECISION);
        if header.precision != want {
            return Err(Error::Contract(format!(
                "checkpoint holds {} parameters, requested {want}",
                header.precision
            )));
        }
        let mut params = ModelParams::new();
        let mut optimizer = ModelParams::new();
        while r.remaining() > 0 {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("block name is not UTF-8: {e}")))?
                .to_string();
            let len = r.u64()? as usize;
            let t = TensorFile::decode(r.take(len)?)?.to_tensor::<T>()?;
            match name.strip_prefix(OPTIMIZER_PREFIX) {
                Some(slot) => optimizer.insert(slot, t),
                None => params.insert(name, t),
            }
        }
        Ok(Checkpoint {
            header,
            params,
            optimizer,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    Ok(fs::write(path, ckpt.encode()?)?)
}

/// Loads a checkpoint, optionally requiring its model configuration to equal
/// `expected`. Parameters are checked against the stored configuration.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let ckpt = Checkpoint::<T>::decode(&fs::read(path)?)?;
    if let Some(want) = expected {
        let got = &ckpt.header.config;
        if got != want {
            return Err(Error::Contract(format!(
                "checkpoint configuration does not match: {}",
                config_diff(got, want)
            )));
        }
    }
    Model::from_parts(ckpt.header.config.clone(), ckpt.params.clone())?;
    Ok(ckpt)
}

/// Names the fields that differ, e.g. `num_classes 4 != 5`.
fn config_diff(got: &ModelConfig, want: &ModelConfig) -> String {
    let (a, b) = (
        serde_json::to_value(got).unwrap_or_default(),
        serde_json::to_value(want).unwrap_or_default(),
    );
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            if b.get(k) != Some(va) {
                diffs.push(format!("{k} {va} != {}", b.get(k).unwrap_or(&serde_json::Value::Null)));
            }
        }
    }
    diffs.join(", ")
}
