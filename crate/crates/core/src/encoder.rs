//! Bidirectional transformer encoder, pooling, and the two linear
//! projections that map pooled states to the output embedding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TokenSeq, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::quant::QuantScheme;

/// Heads used by the attention pooler.
pub const POOL_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    First,
    Last,
    Attention,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "first" => Ok(Pooling::First),
            "last" => Ok(Pooling::Last),
            "attention" => Ok(Pooling::Attention),
            other => Err(Error::config(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub d_intermediate: usize,
    pub d_out: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,
    /// Truncated dimensions supported besides `d_out`, descending.
    #[serde(default)]
    pub mrl_dims: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::desk()
    }
}

impl EncoderConfig {
    /// Small student configuration used throughout the test fixtures.
    pub fn desk() -> Self {
        EncoderConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ffn: 64,
            d_intermediate: 64,
            d_out: 16,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 64,
            pooling: Pooling::Mean,
            mrl_dims: vec![16, 8, 4],
        }
    }

    /// Larger encoder used as the distillation teacher.
    pub fn teacher() -> Self {
        EncoderConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            d_intermediate: 128,
            ..EncoderConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("d_intermediate", self.d_intermediate),
            ("d_out", self.d_out),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("encoder.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 || (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config(format!(
                "encoder.d_model {} must split into {} heads of even width",
                self.d_model, self.n_heads
            )));
        }
        if self.pooling == Pooling::Attention && self.d_model % POOL_HEADS != 0 {
            return Err(Error::config(format!(
                "attention pooling needs d_model divisible by {POOL_HEADS}"
            )));
        }
        if self.d_out > self.d_intermediate {
            return Err(Error::config(format!(
                "encoder.d_out {} exceeds d_intermediate {}",
                self.d_out, self.d_intermediate
            )));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::config(format!(
                "encoder.vocab_size must be at least {VOCAB_SIZE}"
            )));
        }
        for w in self.mrl_dims.windows(2) {
            if w[0] <= w[1] {
                return Err(Error::config("encoder.mrl_dims must be strictly descending"));
            }
        }
        if let Some(&d) = self.mrl_dims.iter().find(|&&d| d == 0 || d > self.d_out) {
            return Err(Error::config(format!(
                "encoder.mrl_dims entry {d} outside 1..={}",
                self.d_out
            )));
        }
        Ok(())
    }

    /// `d_out` followed by every smaller configured prefix, descending.
    pub fn embedding_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.d_out];
        dims.extend(self.mrl_dims.iter().copied().filter(|&d| d < self.d_out));
        dims
    }

    pub fn supports_dim(&self, dim: usize) -> bool {
        dim == self.d_out || self.mrl_dims.contains(&dim)
    }

    /// Every parameter tensor implied by this configuration, in canonical
    /// order, with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![("embed.tokens".to_string(), vec![self.vocab_size, d])];
        for i in 0..self.n_layers {
            let p = format!("layers.{i}");
            out.push((format!("{p}.attn_norm"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            out.push((format!("{p}.ffn_norm"), vec![d]));
            out.push((format!("{p}.ffn.w_gate"), vec![d, self.d_ffn]));
            out.push((format!("{p}.ffn.w_up"), vec![d, self.d_ffn]));
            out.push((format!("{p}.ffn.w_down"), vec![self.d_ffn, d]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        if self.pooling == Pooling::Attention {
            out.push(("pool.query".to_string(), vec![1, d]));
            out.push(("pool.wk".to_string(), vec![d, d]));
            out.push(("pool.wv".to_string(), vec![d, d]));
        }
        out.push(("proj.g".to_string(), vec![d, self.d_intermediate]));
        out.push(("proj.f".to_string(), vec![self.d_intermediate, self.d_out]));
        out
    }
}

/// Role of a parameter tensor, used by the quantization layer mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    Embedding,
    Attention,
    FeedForward,
    Projection,
    Norm,
}

pub fn layer_class(name: &str) -> Option<LayerClass> {
    if name == "embed.tokens" {
        return Some(LayerClass::Embedding);
    }
    if name == "final_norm" || name.ends_with("_norm") {
        return Some(LayerClass::Norm);
    }
    if name.starts_with("pool.") || (name.starts_with("layers.") && name.contains(".attn.")) {
        return Some(LayerClass::Attention);
    }
    if name.starts_with("layers.") && name.contains(".ffn.") {
        return Some(LayerClass::FeedForward);
    }
    if name.starts_with("proj.") {
        return Some(LayerClass::Projection);
    }
    None
}

/// Named parameter tensors of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    tensors: BTreeMap<String, Tensor>,
}

impl EncoderParams {
    /// Builds a parameter set and checks it against `cfg`.
    pub fn from_tensors(cfg: &EncoderConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let p = EncoderParams { tensors };
        p.check(cfg)?;
        Ok(p)
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "parameter set has {} tensors, config implies {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let Some(t) = self.tensors.get(&name) else {
                return Err(Error::contract(format!("missing parameter `{name}`")));
            };
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("parameter `{name}`"),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    fn expect(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    /// Tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }
}

/// Seeded initialization: linear weights ~ N(0, 1/fan_in), token table ~
/// N(0, 1), norm gains at one.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let t = match layer_class(&name) {
            Some(LayerClass::Norm) => Tensor::ones(&shape),
            Some(LayerClass::Embedding) => {
                let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                Tensor::new(shape, data)?
            }
            _ => {
                // pool.query is [1×d]; its fan-in is the model width.
                let fan_in = if name == "pool.query" { shape[1] } else { shape[0] };
                let std = (1.0 / fan_in as f64).sqrt();
                let data = (0..n)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>();
                Tensor::new(shape, data)?
            }
        };
        tensors.insert(name, t);
    }
    EncoderParams::from_tensors(cfg, tensors)
}

/// Graph handles for every parameter, possibly routed through fake
/// quantization.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not bound")))
    }
}

/// Puts `params` on the tape. With `trainable` they become named gradient
/// leaves; with a QAT scheme the quantizable tensors are fake-quantized.
pub fn bind_params<'a>(
    g: &mut Graph<'a>,
    params: &'a EncoderParams,
    trainable: bool,
    qat: Option<&QuantScheme>,
) -> Result<BoundParams> {
    let mut vars = BTreeMap::new();
    for (name, t) in params.iter() {
        let mut v = if trainable {
            g.param(name, t)?
        } else {
            g.constant_ref(t)
        };
        if let Some(scheme) = qat {
            if let Some(rule) = scheme.rule_for(name, t.shape())? {
                v = g.straight_through(v, crate::quant::fake_quant_with(t, &rule))?;
            }
        }
        vars.insert(name.to_string(), v);
    }
    Ok(BoundParams { vars })
}

/// Transformer stack over `ids`. Keys with `key_mask[j] == false` are
/// excluded from attention.
pub fn encode_graph(
    g: &mut Graph<'_>,
    cfg: &EncoderConfig,
    p: &BoundParams,
    ids: &[u32],
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let mut x = g.gather(p.get("embed.tokens")?, &ids)?;
    for i in 0..cfg.n_layers {
        let pre = format!("layers.{i}");
        let h = g.rms_norm(x, p.get(&format!("{pre}.attn_norm"))?)?;
        let q = g.matmul(h, p.get(&format!("{pre}.attn.wq"))?)?;
        let k = g.matmul(h, p.get(&format!("{pre}.attn.wk"))?)?;
        let v = g.matmul(h, p.get(&format!("{pre}.attn.wv"))?)?;
        let q = g.rope(q, cfg.n_heads)?;
        let k = g.rope(k, cfg.n_heads)?;
        let a = g.attention(q, k, v, cfg.n_heads, key_mask.map(<[bool]>::to_vec))?;
        let o = g.matmul(a, p.get(&format!("{pre}.attn.wo"))?)?;
        x = g.add(x, o)?;

        let h = g.rms_norm(x, p.get(&format!("{pre}.ffn_norm"))?)?;
        let gate = g.matmul(h, p.get(&format!("{pre}.ffn.w_gate"))?)?;
        let gate = g.gelu(gate);
        let up = g.matmul(h, p.get(&format!("{pre}.ffn.w_up"))?)?;
        let hidden = g.mul(gate, up)?;
        let f = g.matmul(hidden, p.get(&format!("{pre}.ffn.w_down"))?)?;
        x = g.add(x, f)?;
    }
    g.rms_norm(x, p.get("final_norm")?)
}

/// Reduces `[L×d_model]` token states to a `[1×d_model]` row.
pub fn pool_graph(
    g: &mut Graph<'_>,
    cfg: &EncoderConfig,
    p: &BoundParams,
    states: Var,
    mask: &[bool],
) -> Result<Var> {
    let live: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if live.is_empty() {
        return Err(Error::contract("pooling over a sequence with no content positions"));
    }
    if mask.len() != g.value(states).rows() {
        return Err(Error::contract("pad mask length differs from sequence length"));
    }
    match cfg.pooling {
        Pooling::Mean => g.mean_rows(states, &live),
        Pooling::First => g.select_row(states, live[0]),
        Pooling::Last => g.select_row(states, live[live.len() - 1]),
        Pooling::Attention => {
            let k = g.matmul(states, p.get("pool.wk")?)?;
            let v = g.matmul(states, p.get("pool.wv")?)?;
            let key_mask = (live.len() != mask.len()).then(|| mask.to_vec());
            g.attention(p.get("pool.query")?, k, v, POOL_HEADS, key_mask)
        }
    }
}

pub fn project_graph(g: &mut Graph<'_>, p: &BoundParams, pooled: Var) -> Result<Var> {
    let up = g.matmul(pooled, p.get("proj.g")?)?;
    g.matmul(up, p.get("proj.f")?)
}

/// Unnormalized `[1×d_out]` embedding of a token sequence. Padding is
/// dropped before encoding; content is left-aligned so positions match the
/// masked full-length computation.
pub fn embed_graph(
    g: &mut Graph<'_>,
    cfg: &EncoderConfig,
    p: &BoundParams,
    tokens: &TokenSeq,
) -> Result<Var> {
    let n = tokens.content_len();
    let ids = &tokens.ids()[..n];
    let states = encode_graph(g, cfg, p, ids, None)?;
    let pooled = pool_graph(g, cfg, p, states, &vec![true; n])?;
    project_graph(g, p, pooled)
}

pub fn encode_tokens(cfg: &EncoderConfig, params: &EncoderParams, tokens: &TokenSeq) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, false, None)?;
    let mask = tokens.pad_mask();
    let key_mask = mask.iter().any(|m| !m).then_some(mask.as_slice());
    let out = encode_graph(&mut g, cfg, &p, tokens.ids(), key_mask)?;
    Ok(g.value(out).clone())
}

/// Pooled `[d_model]` vector from token states and their pad mask.
pub fn pool(cfg: &EncoderConfig, params: &EncoderParams, states: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, false, None)?;
    let s = g.constant_ref(states);
    let out = pool_graph(&mut g, cfg, &p, s, mask)?;
    Ok(Tensor::vector(g.value(out).data().to_vec()))
}

/// `f(g(pooled))`, both maps linear without bias.
pub fn project(params: &EncoderParams, pooled: &Tensor) -> Result<Tensor> {
    let up = pooled.matmul(params.expect("proj.g")?)?;
    let out = up.matmul(params.expect("proj.f")?)?;
    Ok(Tensor::vector(out.into_data()))
}

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// First `dim` coordinates of `raw`, rescaled to unit norm.
pub fn normalize_prefix(raw: &[f64], dim: usize) -> Result<Embedding> {
    if dim == 0 || dim > raw.len() {
        return Err(Error::contract(format!(
            "prefix length {dim} outside 1..={}",
            raw.len()
        )));
    }
    let prefix = &raw[..dim];
    let norm = crate::numcore::kernels::dot(prefix, prefix).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::contract(format!(
            "degenerate embedding: prefix of length {dim} has norm {norm}"
        )));
    }
    Ok(Embedding {
        values: prefix.iter().map(|v| v / norm).collect(),
    })
}

/// An encoder configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Encoder { config, params })
    }

    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Encoder { config, params })
    }

    /// Unnormalized full-width output for already formatted text.
    pub fn embed_raw(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text, self.config.max_seq_len);
        let mut g = Graph::new();
        let p = bind_params(&mut g, &self.params, false, None)?;
        let out = embed_graph(&mut g, &self.config, &p, &tokens)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn embed(&self, text: &str, dim: usize) -> Result<Embedding> {
        embed_text(&self.config, &self.params, text, dim)
    }
}

/// tokenize → encode → pool → project → prefix → unit norm.
pub fn embed_text(
    cfg: &EncoderConfig,
    params: &EncoderParams,
    formatted_text: &str,
    mrl_dim: usize,
) -> Result<Embedding> {
    if !cfg.supports_dim(mrl_dim) {
        return Err(Error::contract(format!(
            "dimension {mrl_dim} is neither d_out nor a configured MRL dimension"
        )));
    }
    let tokens = tokenize(formatted_text, cfg.max_seq_len);
    let mut g = Graph::new();
    let p = bind_params(&mut g, params, false, None)?;
    let out = embed_graph(&mut g, cfg, &p, &tokens)?;
    normalize_prefix(g.value(out).data(), mrl_dim)
}
