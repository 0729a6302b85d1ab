//! On-disk checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON manifest of that
//! many bytes, then the tensor payloads concatenated in manifest order.
//! Float tensors are little-endian binary32. Quantized tensors store their
//! codes (8-bit codes one per byte; 4-bit codes two per byte, low nibble
//! first) followed by their binary32 scales. Offsets are relative to the
//! first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::quant::{QuantRule, QuantScheme, QuantizedCheckpoint, QuantizedTensor, StoredTensor};

pub const SCHEMA_VERSION: u32 = 1;

/// Float parameters of one encoder. `frozen` marks distillation teachers,
/// which must not be trained further.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub frozen: bool,
}

impl Checkpoint {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Checkpoint {
            config,
            params,
            frozen: false,
        })
    }

    pub fn encoder(&self) -> Encoder {
        Encoder {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn ensure_trainable(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::contract(
                "checkpoint is frozen (a distillation teacher) and cannot be trained",
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut descs = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in self.params.iter() {
            let offset = payload.len() as u64;
            push_f32s(&mut payload, t.data().iter().map(|&v| v as f32));
            descs.push(TensorDesc {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
                quant: None,
            });
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            format: Format::Float,
            frozen: self.frozen,
            config: self.config.clone(),
            scheme: None,
            tensors: descs,
        };
        write_file(path.as_ref(), &manifest, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match AnyCheckpoint::load(path.as_ref())? {
            AnyCheckpoint::Float(c) => Ok(c),
            AnyCheckpoint::Quantized(_) => Err(bad(
                path.as_ref(),
                "expected a float checkpoint, found a quantized one",
            )),
        }
    }
}

/// Either kind of checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyCheckpoint {
    Float(Checkpoint),
    Quantized(QuantizedCheckpoint),
}

impl AnyCheckpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let (manifest, payload) = split_file(path, &bytes)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(bad(
                path,
                format!("unsupported schema version {}", manifest.schema_version),
            ));
        }
        manifest.config.validate()?;
        let mut stored = BTreeMap::new();
        for d in &manifest.tensors {
            let n: usize = d.shape.iter().product();
            let start = d.offset as usize;
            let end = start
                .checked_add(d.nbytes as usize)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| bad(path, format!("tensor `{}` overruns the payload", d.name)))?;
            let chunk = &payload[start..end];
            let t = match &d.quant {
                None => {
                    if chunk.len() != 4 * n {
                        return Err(bad(path, format!("tensor `{}` has a short payload", d.name)));
                    }
                    let data = read_f32s(chunk).map(f64::from).collect();
                    StoredTensor::Float(Tensor::new(d.shape.clone(), data)?)
                }
                Some(q) => StoredTensor::Quantized(decode_quantized(path, d, q, chunk, n)?),
            };
            if stored.insert(d.name.clone(), t).is_some() {
                return Err(bad(path, format!("tensor `{}` listed twice", d.name)));
            }
        }
        match manifest.format {
            Format::Float => {
                let tensors = stored
                    .into_iter()
                    .map(|(k, v)| (k, v.to_tensor()))
                    .collect();
                let params = EncoderParams::from_tensors(&manifest.config, tensors)
                    .map_err(|e| bad(path, e.to_string()))?;
                Ok(AnyCheckpoint::Float(Checkpoint {
                    config: manifest.config,
                    params,
                    frozen: manifest.frozen,
                }))
            }
            Format::Quantized => {
                let scheme = manifest
                    .scheme
                    .ok_or_else(|| bad(path, "quantized checkpoint without a scheme"))?;
                let q = QuantizedCheckpoint {
                    config: manifest.config,
                    scheme,
                    tensors: stored,
                };
                q.dequantize().map_err(|e| bad(path, e.to_string()))?;
                Ok(AnyCheckpoint::Quantized(q))
            }
        }
    }

    /// Parameters as used for inference (dequantized when needed).
    pub fn into_encoder(self) -> Result<Encoder> {
        match self {
            AnyCheckpoint::Float(c) => Ok(Encoder {
                config: c.config,
                params: c.params,
            }),
            AnyCheckpoint::Quantized(q) => q.dequantize(),
        }
    }

    pub fn scheme_tag(&self) -> String {
        match self {
            AnyCheckpoint::Float(_) => "float".to_string(),
            AnyCheckpoint::Quantized(q) => q.scheme.tag(),
        }
    }
}

impl QuantizedCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut descs = Vec::new();
        let mut payload = Vec::new();
        for (name, st) in &self.tensors {
            let offset = payload.len() as u64;
            let (shape, quant) = match st {
                StoredTensor::Float(t) => {
                    push_f32s(&mut payload, t.data().iter().map(|&v| v as f32));
                    (t.shape().to_vec(), None)
                }
                StoredTensor::Quantized(q) => {
                    let codes = encode_codes(&q.codes, q.rule.bits);
                    payload.extend_from_slice(&codes);
                    let scales_offset = payload.len() as u64;
                    push_f32s(&mut payload, q.scales.iter().copied());
                    (
                        q.shape.clone(),
                        Some(QuantDesc {
                            rule: q.rule,
                            scales_offset,
                            n_scales: q.scales.len(),
                        }),
                    )
                }
            };
            descs.push(TensorDesc {
                name: name.clone(),
                shape,
                offset,
                nbytes: payload.len() as u64 - offset,
                quant,
            });
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            format: Format::Quantized,
            frozen: false,
            config: self.config.clone(),
            scheme: Some(self.scheme),
            tensors: descs,
        };
        write_file(path.as_ref(), &manifest, &payload)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Float,
    Quantized,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    format: Format,
    frozen: bool,
    config: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scheme: Option<QuantScheme>,
    tensors: Vec<TensorDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    quant: Option<QuantDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantDesc {
    #[serde(flatten)]
    rule: QuantRule,
    scales_offset: u64,
    n_scales: usize,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn push_f32s(out: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

fn encode_codes(codes: &[i8], bits: u8) -> Vec<u8> {
    if bits == 8 {
        return codes.iter().map(|&c| c as u8).collect();
    }
    codes
        .chunks(2)
        .map(|pair| {
            let lo = (pair[0] as u8) & 0x0F;
            let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0F);
            lo | (hi << 4)
        })
        .collect()
}

fn decode_codes(bytes: &[u8], bits: u8, n: usize) -> Vec<i8> {
    if bits == 8 {
        return bytes.iter().map(|&b| b as i8).collect();
    }
    let nibble = |x: u8| ((x << 4) as i8) >> 4;
    let mut out = Vec::with_capacity(n);
    for &b in bytes {
        out.push(nibble(b & 0x0F));
        out.push(nibble(b >> 4));
    }
    out.truncate(n);
    out
}

fn decode_quantized(
    path: &Path,
    d: &TensorDesc,
    q: &QuantDesc,
    chunk: &[u8],
    n: usize,
) -> Result<QuantizedTensor> {
    let code_bytes = match q.rule.bits {
        8 => n,
        4 => n.div_ceil(2),
        b => return Err(bad(path, format!("tensor `{}` has bit width {b}", d.name))),
    };
    let scales_at = (q.scales_offset - d.offset) as usize;
    if scales_at != code_bytes || chunk.len() != code_bytes + 4 * q.n_scales {
        return Err(bad(path, format!("tensor `{}` has an inconsistent layout", d.name)));
    }
    let t = QuantizedTensor {
        shape: d.shape.clone(),
        codes: decode_codes(&chunk[..code_bytes], q.rule.bits, n),
        scales: read_f32s(&chunk[code_bytes..]).collect(),
        rule: q.rule,
    };
    t.validate().map_err(|e| bad(path, format!("tensor `{}`: {e}", d.name)))?;
    Ok(t)
}

fn write_file(path: &Path, manifest: &Manifest, payload: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(manifest)?;
    let mut bytes = Vec::with_capacity(8 + header.len() + payload.len());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(payload);
    fs::write(path, bytes)?;
    Ok(())
}

fn split_file<'b>(path: &Path, bytes: &'b [u8]) -> Result<(Manifest, &'b [u8])> {
    if bytes.len() < 8 {
        return Err(bad(path, "file too short"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(path, "header length exceeds file size"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[8..end]).map_err(|e| bad(path, format!("manifest: {e}")))?;
    Ok((manifest, &bytes[end..]))
}
