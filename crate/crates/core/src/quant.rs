//! Symmetric integer weight quantization: per-block and per-channel groups,
//! fake quantization for training, and whole-checkpoint conversion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{layer_class, Encoder, EncoderConfig, EncoderParams, LayerClass};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    Int4PerBlock,
    Int8PerBlock,
    MixedPerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub kind: QuantKind,
    #[serde(default = "default_block")]
    pub block_size: usize,
}

fn default_block() -> usize {
    DEFAULT_BLOCK_SIZE
}

impl QuantScheme {
    pub fn int4_per_block(block_size: usize) -> Self {
        QuantScheme {
            kind: QuantKind::Int4PerBlock,
            block_size,
        }
    }

    pub fn int8_per_block(block_size: usize) -> Self {
        QuantScheme {
            kind: QuantKind::Int8PerBlock,
            block_size,
        }
    }

    pub fn mixed_per_channel() -> Self {
        QuantScheme {
            kind: QuantKind::MixedPerChannel,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }

    /// Parses the command-line spelling (`int4-block`, `int8-block`, `mixed`).
    pub fn parse(name: &str, block_size: usize) -> Result<Self> {
        let scheme = match name {
            "int4-block" => QuantScheme::int4_per_block(block_size),
            "int8-block" => QuantScheme::int8_per_block(block_size),
            "mixed" => QuantScheme::mixed_per_channel(),
            other => {
                return Err(Error::config(format!(
                    "unknown scheme `{other}` (expected int4-block, int8-block or mixed)"
                )))
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::config("quantization block size must be at least 1"));
        }
        Ok(())
    }

    pub fn tag(&self) -> String {
        match self.kind {
            QuantKind::Int4PerBlock => format!("int4-block{}", self.block_size),
            QuantKind::Int8PerBlock => format!("int8-block{}", self.block_size),
            QuantKind::MixedPerChannel => "mixed-channel".to_string(),
        }
    }

    /// How the named tensor is stored under this scheme; `None` keeps it in
    /// floating point (norm gains).
    pub fn rule_for(&self, name: &str, shape: &[usize]) -> Result<Option<QuantRule>> {
        let class = layer_class(name).ok_or_else(|| Error::Mapping(name.to_string()))?;
        if class == LayerClass::Norm {
            return Ok(None);
        }
        let rule = match self.kind {
            QuantKind::Int4PerBlock => QuantRule {
                bits: 4,
                granularity: Granularity::PerBlock {
                    block_size: self.block_size,
                },
            },
            QuantKind::Int8PerBlock => QuantRule {
                bits: 8,
                granularity: Granularity::PerBlock {
                    block_size: self.block_size,
                },
            },
            QuantKind::MixedPerChannel => {
                let bits = if class == LayerClass::Attention { 8 } else { 4 };
                // Linear weights are [in × out]: one group per output column.
                // The token table and the pooler query vector group by row.
                let axis = if class == LayerClass::Embedding || shape.len() < 2 || shape[0] == 1 {
                    0
                } else {
                    1
                };
                QuantRule {
                    bits,
                    granularity: Granularity::PerChannel { axis },
                }
            }
        };
        Ok(Some(rule))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "granularity", rename_all = "snake_case")]
pub enum Granularity {
    PerBlock { block_size: usize },
    PerChannel { axis: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantRule {
    pub bits: u8,
    #[serde(flatten)]
    pub granularity: Granularity,
}

pub fn qmax(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Symmetric quantization of one group: `scale = max|v| / qmax` (stored as
/// binary32), codes rounded half-to-even and clamped to `±qmax`. An all-zero
/// group gets scale 0.
pub fn quantize_group(values: &[f64], bits: u8) -> Result<(Vec<i8>, f32)> {
    if bits != 4 && bits != 8 {
        return Err(Error::contract(format!("unsupported bit width {bits}")));
    }
    let q = qmax(bits);
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        return Ok((vec![0; values.len()], 0.0));
    }
    let scale = (max_abs / q as f64) as f32;
    if scale == 0.0 {
        return Ok((vec![0; values.len()], 0.0));
    }
    let s = scale as f64;
    let codes = values
        .iter()
        .map(|&v| (v / s).round_ties_even().clamp(-q as f64, q as f64) as i8)
        .collect();
    Ok((codes, scale))
}

pub fn dequantize_group(codes: &[i8], scale: f32) -> Vec<f64> {
    let s = scale as f64;
    codes.iter().map(|&c| c as f64 * s).collect()
}

/// Element indices of each quantization group, in group order.
fn groups(shape: &[usize], granularity: Granularity) -> Vec<Vec<usize>> {
    let n: usize = shape.iter().product();
    let cols = if shape.len() >= 2 { shape[shape.len() - 1] } else { n };
    let rows = n / cols;
    match granularity {
        Granularity::PerBlock { block_size } => (0..n)
            .step_by(block_size)
            .map(|s| (s..(s + block_size).min(n)).collect())
            .collect(),
        Granularity::PerChannel { axis: 0 } => {
            (0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect()
        }
        Granularity::PerChannel { .. } => (0..cols)
            .map(|c| (0..rows).map(|r| r * cols + c).collect())
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    /// Row-major codes.
    pub codes: Vec<i8>,
    /// One scale per group.
    pub scales: Vec<f32>,
    pub rule: QuantRule,
}

impl QuantizedTensor {
    pub fn quantize(t: &Tensor, rule: QuantRule) -> Result<Self> {
        let mut codes = vec![0i8; t.len()];
        let mut scales = Vec::new();
        for group in groups(t.shape(), rule.granularity) {
            let vals: Vec<f64> = group.iter().map(|&i| t.data()[i]).collect();
            let (c, s) = quantize_group(&vals, rule.bits)?;
            for (&i, ci) in group.iter().zip(c) {
                codes[i] = ci;
            }
            scales.push(s);
        }
        Ok(QuantizedTensor {
            shape: t.shape().to_vec(),
            codes,
            scales,
            rule,
        })
    }

    pub fn dequantize(&self) -> Tensor {
        let mut data = vec![0.0; self.codes.len()];
        for (group, &s) in groups(&self.shape, self.rule.granularity).iter().zip(&self.scales) {
            for &i in group {
                data[i] = self.codes[i] as f64 * s as f64;
            }
        }
        Tensor::from_parts(self.shape.clone(), data)
    }

    /// Scale of the group containing each element.
    pub fn element_scales(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.codes.len()];
        for (group, &s) in groups(&self.shape, self.rule.granularity).iter().zip(&self.scales) {
            for &i in group {
                out[i] = s;
            }
        }
        out
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let q = qmax(self.rule.bits);
        if self.codes.iter().any(|&c| (c as i32).abs() > q) {
            return Err(Error::contract(format!("code outside ±{q}")));
        }
        let n_groups = groups(&self.shape, self.rule.granularity).len();
        if self.scales.len() != n_groups {
            return Err(Error::contract(format!(
                "expected {n_groups} scales, found {}",
                self.scales.len()
            )));
        }
        Ok(())
    }
}

/// Forward value of fake quantization: dequantize(quantize(t)).
pub fn fake_quant_with(t: &Tensor, rule: &QuantRule) -> Tensor {
    QuantizedTensor::quantize(t, *rule)
        .expect("rules only carry supported bit widths")
        .dequantize()
}

/// Fake-quantizes `t` as the tensor `name` would be stored under `scheme`.
/// Tensors the scheme keeps in floating point pass through unchanged.
pub fn fake_quant(name: &str, t: &Tensor, scheme: &QuantScheme) -> Result<Tensor> {
    Ok(match scheme.rule_for(name, t.shape())? {
        Some(rule) => fake_quant_with(t, &rule),
        None => t.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    Float(Tensor),
    Quantized(QuantizedTensor),
}

impl StoredTensor {
    pub fn to_tensor(&self) -> Tensor {
        match self {
            StoredTensor::Float(t) => t.clone(),
            StoredTensor::Quantized(q) => q.dequantize(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedCheckpoint {
    pub config: EncoderConfig,
    pub scheme: QuantScheme,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl QuantizedCheckpoint {
    pub fn dequantize(&self) -> Result<Encoder> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.to_tensor()))
            .collect();
        let params = EncoderParams::from_tensors(&self.config, tensors)?;
        Encoder::new(self.config.clone(), params)
    }
}

pub fn apply_quant_scheme(ckpt: &Checkpoint, scheme: &QuantScheme) -> Result<QuantizedCheckpoint> {
    scheme.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, t) in ckpt.params.iter() {
        let stored = match scheme.rule_for(name, t.shape())? {
            Some(rule) => StoredTensor::Quantized(QuantizedTensor::quantize(t, rule)?),
            None => StoredTensor::Float(t.clone()),
        };
        tensors.insert(name.to_string(), stored);
    }
    Ok(QuantizedCheckpoint {
        config: ckpt.config.clone(),
        scheme: *scheme,
        tensors,
    })
}
