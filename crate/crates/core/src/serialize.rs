//! The quantized on-disk model format.
//!
//! Little-endian layout:
//!
//! ```text
//! "CVRT" | u32 version | [u8; 32] vocab digest | u32 n | n bytes JSON config
//! u32 tensor count, then per tensor:
//!   u16 name length | name | u8 precision class | u8 rank | u32 dims...
//!   8-bit class: f32 lo | f32 hi | u8 codes...
//!   16-bit class: binary16 values...
//!   32-bit class: f32 values...
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::ModelConfig;
use crate::encoder::RunMode;
use crate::error::{Error, Result};
use crate::model::{DualEncoder, InferenceModel};
use crate::params::{ParamStore, PrecisionClass, Weights};
use crate::quant::{dequantize, from_f16_bits, quantize_embeddings, to_f16_bits, QuantRange, QuantState, QuantizedTable};
use crate::tokenizer::SubwordVocab;

pub const MAGIC: &[u8; 4] = b"CVRT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Codes(QuantizedTable),
    Half(Vec<u16>),
    Full(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub class: PrecisionClass,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn values(&self) -> Vec<f32> {
        match &self.data {
            TensorData::Codes(t) => dequantize(t),
            TensorData::Half(bits) => from_f16_bits(bits),
            TensorData::Full(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub version: u32,
    pub vocab_digest: [u8; 32],
    pub config: ModelConfig,
    pub tensors: Vec<StoredTensor>,
}

/// Byte accounting of a serialized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeBreakdown {
    pub embedding_params: usize,
    pub network_params: usize,
    pub embedding_bytes: usize,
    pub network_bytes: usize,
    /// File header plus per-tensor names, shapes and ranges.
    pub header_bytes: usize,
    pub total_bytes: usize,
}

impl ModelFile {
    /// Quantize the shadows in `store` with the ranges in `quant`.
    pub fn from_store(config: &ModelConfig, vocab_digest: [u8; 32], store: &ParamStore, quant: &QuantState) -> Result<Self> {
        let mut tensors = Vec::with_capacity(store.len());
        for (id, t) in store.ids().zip(store.tensors()) {
            let data = match t.class {
                PrecisionClass::Embedding8 => {
                    let range = quant.range(id).unwrap_or_else(|| QuantRange::covering(&t.data));
                    TensorData::Codes(quantize_embeddings(&t.data, range).0)
                }
                PrecisionClass::Param16 | PrecisionClass::Activation16 => TensorData::Half(to_f16_bits(&t.data)),
                PrecisionClass::Stable32 => TensorData::Full(t.data.clone()),
            };
            tensors.push(StoredTensor { name: t.name.clone(), class: t.class, shape: t.shape.clone(), data });
        }
        Ok(Self { version: FORMAT_VERSION, vocab_digest, config: config.clone(), tensors })
    }

    /// The rendering a forward pass uses; identical to [`QuantState::render`]
    /// for the same shadows and ranges.
    pub fn weights(&self) -> Weights<f32> {
        Weights::from_parts(self.tensors.iter().map(|t| t.shape.clone()).collect(), self.tensors.iter().map(StoredTensor::values).collect())
    }

    /// Rendered values as a fresh 32-bit store, e.g. to fine-tune from.
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            store.add(t.name.clone(), t.shape.clone(), t.class, t.values());
        }
        store
    }

    pub fn check_vocab(&self, vocab: &SubwordVocab) -> Result<()> {
        if vocab.digest() != self.vocab_digest {
            return Err(Error::format("vocabulary digest does not match the one the model was trained with"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.vocab_digest);
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::format(format!("tensor name too long: {}", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.class.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::Codes(q) => {
                    out.extend_from_slice(&q.range.lo.to_le_bytes());
                    out.extend_from_slice(&q.range.hi.to_le_bytes());
                    out.extend_from_slice(&q.codes);
                }
                TensorData::Half(bits) => bits.iter().for_each(|b| out.extend_from_slice(&b.to_le_bytes())),
                TensorData::Full(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a model file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        let vocab_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let class_code = r.take(1)?[0];
            let class = PrecisionClass::from_code(class_code).ok_or_else(|| Error::format(format!("unknown precision class {class_code}")))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match class {
                PrecisionClass::Embedding8 => {
                    let lo = r.f32()?;
                    let hi = r.f32()?;
                    let range = QuantRange::new(lo, hi)?;
                    TensorData::Codes(QuantizedTable { range, codes: r.take(n)?.to_vec() })
                }
                PrecisionClass::Param16 | PrecisionClass::Activation16 => {
                    TensorData::Half(r.take(2 * n)?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
                }
                PrecisionClass::Stable32 => {
                    TensorData::Full(r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
                }
            };
            tensors.push(StoredTensor { name, class, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
        }
        Ok(Self { version, vocab_digest, config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn size_breakdown(&self) -> Result<SizeBreakdown> {
        let mut b = SizeBreakdown {
            embedding_params: 0,
            network_params: 0,
            embedding_bytes: 0,
            network_bytes: 0,
            header_bytes: 0,
            total_bytes: self.to_bytes()?.len(),
        };
        for t in &self.tensors {
            match t.class {
                PrecisionClass::Embedding8 => {
                    b.embedding_params += t.numel();
                    b.embedding_bytes += t.numel();
                }
                PrecisionClass::Param16 | PrecisionClass::Activation16 => {
                    b.network_params += t.numel();
                    b.network_bytes += 2 * t.numel();
                }
                PrecisionClass::Stable32 => {
                    b.network_params += t.numel();
                    b.network_bytes += 4 * t.numel();
                }
            }
        }
        b.header_bytes = b.total_bytes - b.embedding_bytes - b.network_bytes;
        Ok(b)
    }

    /// Frozen inference model. `expect_multi` rejects files whose
    /// multi-context flag differs from what the caller needs.
    pub fn into_inference(self, vocab: SubwordVocab, expect_multi: Option<bool>) -> Result<InferenceModel> {
        self.check_vocab(&vocab)?;
        if let Some(m) = expect_multi {
            if m != self.config.multi_context {
                return Err(Error::format(format!(
                    "model multi-context flag is {} but {} was requested",
                    self.config.multi_context, m
                )));
            }
        }
        let store = self.to_store();
        let model = DualEncoder::from_store(&self.config, &store)?;
        InferenceModel::new(model, self.weights(), vocab, RunMode::MIXED)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(format!("file truncated at byte {} (needed {n} more)", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Write the quantized rendering of `store` to `path`.
pub fn save_model(path: impl AsRef<Path>, config: &ModelConfig, vocab: &SubwordVocab, store: &ParamStore, quant: &QuantState) -> Result<ModelFile> {
    let file = ModelFile::from_store(config, vocab.digest(), store, quant)?;
    file.save(path)?;
    Ok(file)
}

pub fn load_model(path: impl AsRef<Path>, vocab: SubwordVocab, expect_multi: Option<bool>) -> Result<InferenceModel> {
    ModelFile::load(path)?.into_inference(vocab, expect_multi)
}
