//! A small decoder-only transformer whose feed-forward blocks are all MoE
//! layers.
//!
//! Layout: token embedding, then per layer a pre-norm causal attention block
//! and a pre-norm MoE block (each wrapped in a residual), then a final
//! LayerNorm and an unembedding matrix. Linear layers carry no bias.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::moe::{moe_forward, ExpertVars, MoeConfig, RoutingDecision};
use crate::tensor::{Real, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelConfigFields {
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    vocab_size: usize,
    seq_len: usize,
    #[serde(default = "default_rotary")]
    rotary_pct: f64,
    #[serde(default = "default_dropout")]
    attn_dropout_p: f64,
    #[serde(default = "default_std")]
    init_std: f64,
    #[serde(default)]
    tied_embeddings: bool,
    moe: MoeConfig,
}

fn default_rotary() -> f64 {
    ModelConfig::DEFAULT_ROTARY_PCT
}
fn default_dropout() -> f64 {
    ModelConfig::DEFAULT_ATTN_DROPOUT
}
fn default_std() -> f64 {
    ModelConfig::DEFAULT_INIT_STD
}

/// Validated model shape. `d_head` is derived as `d_model / n_heads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfigFields", into = "ModelConfigFields")]
pub struct ModelConfig {
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    vocab_size: usize,
    seq_len: usize,
    rotary_pct: f64,
    attn_dropout_p: f64,
    init_std: f64,
    tied_embeddings: bool,
    moe: MoeConfig,
}

impl TryFrom<ModelConfigFields> for ModelConfig {
    type Error = Error;

    fn try_from(f: ModelConfigFields) -> Result<Self> {
        ModelConfig {
            n_layers: f.n_layers,
            d_model: f.d_model,
            n_heads: f.n_heads,
            vocab_size: f.vocab_size,
            seq_len: f.seq_len,
            rotary_pct: f.rotary_pct,
            attn_dropout_p: f.attn_dropout_p,
            init_std: f.init_std,
            tied_embeddings: f.tied_embeddings,
            moe: f.moe,
        }
        .validated()
    }
}

impl From<ModelConfig> for ModelConfigFields {
    fn from(c: ModelConfig) -> Self {
        ModelConfigFields {
            n_layers: c.n_layers,
            d_model: c.d_model,
            n_heads: c.n_heads,
            vocab_size: c.vocab_size,
            seq_len: c.seq_len,
            rotary_pct: c.rotary_pct,
            attn_dropout_p: c.attn_dropout_p,
            init_std: c.init_std,
            tied_embeddings: c.tied_embeddings,
            moe: c.moe,
        }
    }
}

impl ModelConfig {
    pub const DEFAULT_ROTARY_PCT: f64 = 0.5;
    pub const DEFAULT_ATTN_DROPOUT: f64 = 0.1;
    pub const DEFAULT_INIT_STD: f64 = 0.01;

    /// Config with default rotary fraction, dropout and init scale.
    /// `moe.d_model()` must equal `d_model`.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        vocab_size: usize,
        seq_len: usize,
        moe: MoeConfig,
    ) -> Result<Self> {
        ModelConfig {
            n_layers,
            d_model: moe.d_model(),
            n_heads,
            vocab_size,
            seq_len,
            rotary_pct: Self::DEFAULT_ROTARY_PCT,
            attn_dropout_p: Self::DEFAULT_ATTN_DROPOUT,
            init_std: Self::DEFAULT_INIT_STD,
            tied_embeddings: false,
            moe,
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return bad("n_layers, n_heads, vocab_size and seq_len must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "n_heads = {} does not divide d_model = {}",
                self.n_heads, self.d_model
            ));
        }
        if self.moe.d_model() != self.d_model {
            return bad(format!(
                "moe.d_model = {} but d_model = {}",
                self.moe.d_model(),
                self.d_model
            ));
        }
        if !(0.0..=1.0).contains(&self.rotary_pct) {
            return bad(format!("rotary_pct must be in [0, 1], got {}", self.rotary_pct));
        }
        let span = self.rotary_pct * self.d_head() as f64;
        if (span - span.round()).abs() > 1e-9 || !(span.round() as usize).is_multiple_of(2) {
            return bad(format!(
                "rotated span rotary_pct * d_head = {span} must be an even integer"
            ));
        }
        if !(0.0..1.0).contains(&self.attn_dropout_p) {
            return bad(format!("attn_dropout_p must be in [0, 1), got {}", self.attn_dropout_p));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!("init_std must be finite and >= 0, got {}", self.init_std));
        }
        Ok(self)
    }

    pub fn with_rotary_pct(mut self, pct: f64) -> Result<Self> {
        self.rotary_pct = pct;
        self.validated()
    }

    pub fn with_attn_dropout(mut self, p: f64) -> Result<Self> {
        self.attn_dropout_p = p;
        self.validated()
    }

    pub fn with_init_std(mut self, std: f64) -> Result<Self> {
        self.init_std = std;
        self.validated()
    }

    pub fn with_tied_embeddings(mut self, tied: bool) -> Self {
        self.tied_embeddings = tied;
        self
    }

    pub fn with_moe(mut self, moe: MoeConfig) -> Result<Self> {
        self.moe = moe;
        self.validated()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
    pub fn d_model(&self) -> usize {
        self.d_model
    }
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
    pub fn rotary_pct(&self) -> f64 {
        self.rotary_pct
    }
    /// Number of rotated dims per head.
    pub fn rotary_dims(&self) -> usize {
        (self.rotary_pct * self.d_head() as f64).round() as usize
    }
    pub fn attn_dropout_p(&self) -> f64 {
        self.attn_dropout_p
    }
    pub fn init_std(&self) -> f64 {
        self.init_std
    }
    pub fn tied_embeddings(&self) -> bool {
        self.tied_embeddings
    }
    pub fn moe(&self) -> &MoeConfig {
        &self.moe
    }
}

/// How a parameter is treated by initialisation and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    NormGain,
    NormBias,
}

impl ParamKind {
    pub fn is_norm(self) -> bool {
        !matches!(self, ParamKind::Weight)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of every parameter tensor in the model.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let n = cfg.moe.n_experts();
    let h = cfg.moe.d_expert();
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind| out.push(ParamSpec { name, shape, kind });
    push("embed".into(), vec![cfg.vocab_size, d], ParamKind::Weight);
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        push(format!("{p}.attn_norm.gain"), vec![d], ParamKind::NormGain);
        push(format!("{p}.attn_norm.bias"), vec![d], ParamKind::NormBias);
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("{p}.attn.{w}"), vec![d, d], ParamKind::Weight);
        }
        push(format!("{p}.moe_norm.gain"), vec![d], ParamKind::NormGain);
        push(format!("{p}.moe_norm.bias"), vec![d], ParamKind::NormBias);
        push(format!("{p}.moe.router"), vec![d, n], ParamKind::Weight);
        for e in 0..n {
            push(format!("{p}.moe.experts.{e}.w_gate"), vec![d, h], ParamKind::Weight);
            push(format!("{p}.moe.experts.{e}.w_up"), vec![d, h], ParamKind::Weight);
            push(format!("{p}.moe.experts.{e}.w_down"), vec![h, d], ParamKind::Weight);
        }
    }
    push("final_norm.gain".into(), vec![d], ParamKind::NormGain);
    push("final_norm.bias".into(), vec![d], ParamKind::NormBias);
    if !cfg.tied_embeddings {
        push("unembed".into(), vec![d, cfg.vocab_size], ParamKind::Weight);
    }
    out
}

const LAYER_FIXED: usize = 9;

fn layer_block(cfg: &ModelConfig) -> usize {
    LAYER_FIXED + 3 * cfg.moe.n_experts()
}

/// Model parameters in [`param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let specs = param_specs(cfg);
        if specs.len() != tensors.len() {
            return Err(shape_err(
                "params",
                format!("{} tensors for {} parameters", tensors.len(), specs.len()),
            ));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(shape_err(
                    "params",
                    format!("{} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape),
                ));
            }
        }
        Ok(ModelParams { specs, tensors })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn register(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Writes the checkpoint format: an 8-byte little-endian header length,
    /// a JSON header of `(name, shape, offset)` entries, then every value as
    /// a little-endian `f32`. Offsets count bytes from the start of the data
    /// section.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.specs.len());
        let mut offset = 0usize;
        for s in &self.specs {
            entries.push(CheckpointEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
                offset,
            });
            offset += 4 * s.numel();
        }
        let header = serde_json::to_vec(&CheckpointHeader { params: entries })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ModelParams::save`] and checks it
    /// against `cfg`.
    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Checkpoint(format!("header length {len}")));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let specs = param_specs(cfg);
        if header.params.len() != specs.len() {
            return Err(Error::Checkpoint(format!(
                "{} entries, config expects {}",
                header.params.len(),
                specs.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (s, e) in specs.iter().zip(&header.params) {
            if s.name != e.name || s.shape != e.shape {
                return Err(Error::Checkpoint(format!(
                    "entry {} {:?} does not match {} {:?}",
                    e.name, e.shape, s.name, s.shape
                )));
            }
            let end = e.offset + 4 * s.numel();
            let bytes = data
                .get(e.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("{} runs past end of data", e.name)))?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            tensors.push(Tensor::new(s.shape.clone(), values)?);
        }
        Ok(ModelParams { specs, tensors })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    params: Vec<CheckpointEntry>,
}

/// Weights ~ `Normal(0, init_std²)`, norm gains 1, norm biases 0. Samples
/// are drawn in 64-bit from a ChaCha8 stream seeded by `seed`, in
/// [`param_specs`] order.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = param_specs(cfg);
    let tensors = specs
        .iter()
        .map(|s| match s.kind {
            ParamKind::Weight => Tensor::randn(s.shape.clone(), cfg.init_std, &mut rng),
            ParamKind::NormGain => Tensor::full(s.shape.clone(), T::one()),
            ParamKind::NormBias => Tensor::zeros(s.shape.clone()),
        })
        .collect();
    ModelParams { specs, tensors }
}

/// Graph handles for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Graph handles for one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attn_norm: (Var, Var),
    pub attn: AttentionVars,
    pub moe_norm: (Var, Var),
    pub router: Var,
    pub experts: Vec<ExpertVars>,
}

/// Graph handles for the full model, resolved from a flat [`param_specs`]
/// ordered list.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: (Var, Var),
    /// `None` when embeddings are tied.
    pub unembed: Option<Var>,
}

impl ModelVars {
    pub fn from_flat(cfg: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let expected = param_specs(cfg).len();
        if vars.len() != expected {
            return Err(shape_err(
                "model vars",
                format!("{} vars for {expected} parameters", vars.len()),
            ));
        }
        let block = layer_block(cfg);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let b = &vars[1 + l * block..1 + (l + 1) * block];
                LayerVars {
                    attn_norm: (b[0], b[1]),
                    attn: AttentionVars {
                        wq: b[2],
                        wk: b[3],
                        wv: b[4],
                        wo: b[5],
                    },
                    moe_norm: (b[6], b[7]),
                    router: b[8],
                    experts: b[LAYER_FIXED..]
                        .chunks(3)
                        .map(|w| ExpertVars {
                            w_gate: w[0],
                            w_up: w[1],
                            w_down: w[2],
                        })
                        .collect(),
                }
            })
            .collect();
        let tail = 1 + cfg.n_layers * block;
        Ok(ModelVars {
            embed: vars[0],
            layers,
            final_norm: (vars[tail], vars[tail + 1]),
            unembed: (!cfg.tied_embeddings).then(|| vars[tail + 2]),
        })
    }
}

/// Whether attention dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Rotary embedding on `x: [n, heads, d_head]` over the first
/// `rotary_pct · d_head` dims of each head.
pub fn apply_rope<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    positions: &[usize],
    rotary_pct: f64,
) -> Result<Var> {
    let d_head = match g.shape(x) {
        [_, _, d] => *d,
        s => return Err(shape_err("apply_rope", format!("{s:?} is not [n, heads, d_head]"))),
    };
    let span = rotary_pct * d_head as f64;
    if !(0.0..=1.0).contains(&rotary_pct) || (span - span.round()).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "rotary_pct {rotary_pct} gives a non-integer span for d_head = {d_head}"
        )));
    }
    g.rope(x, positions, span.round() as usize, ROPE_BASE)
}

/// Multi-head causal self-attention on `x: [batch · t, d_model]`, holding
/// `batch` sequences of length `t` back to back. Scores are scaled by
/// `1/sqrt(d_head)`; attention probabilities pass through dropout when
/// `dropout` carries `(p, seed)`.
pub fn causal_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    batch: usize,
    w: &AttentionVars,
    cfg: &ModelConfig,
    dropout: Option<(f64, u64)>,
) -> Result<Var> {
    let (rows, d) = match g.shape(x) {
        [r, d] if *d == cfg.d_model => (*r, *d),
        s => return Err(shape_err("attention", format!("{s:?} with d_model {}", cfg.d_model))),
    };
    if batch == 0 || rows % batch != 0 {
        return Err(Error::NotDivisible(batch, rows));
    }
    let t = rows / batch;
    let (h, dh) = (cfg.n_heads, cfg.d_head());
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();

    let heads = |g: &mut Graph<T>, w: Var, rope: bool| -> Result<Var> {
        let p = g.matmul(x, w)?;
        let mut p = g.reshape(p, vec![rows, h, dh])?;
        if rope {
            p = apply_rope(g, p, &positions, cfg.rotary_pct)?;
        }
        g.reshape(p, vec![batch, t, h, dh])
    };
    let q = heads(g, w.wq, true)?;
    let k = heads(g, w.wk, true)?;
    let v = heads(g, w.wv, false)?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let q = g.reshape(q, vec![batch * h, t, dh])?;
    let k = g.permute(k, &[0, 2, 3, 1])?;
    let k = g.reshape(k, vec![batch * h, dh, t])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;
    let v = g.reshape(v, vec![batch * h, t, dh])?;

    let scores = g.matmul(q, k)?;
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
    let mut probs = g.causal_softmax(scores)?;
    if let Some((p, seed)) = dropout {
        probs = g.dropout(probs, p, seed)?;
    }
    let ctx = g.matmul(probs, v)?;
    let ctx = g.reshape(ctx, vec![batch, h, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, vec![rows, d])?;
    g.matmul(ctx, w.wo)
}

/// Result of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch · t, vocab]`
    pub logits: Var,
    /// Load-balancing loss averaged over layers (unscaled).
    pub aux_loss: Var,
    /// Router z-loss averaged over layers (unscaled).
    pub z_loss: Var,
    /// Dispatched routing decision for each layer.
    pub decisions: Vec<RoutingDecision>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize], batch: usize) -> Result<usize> {
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    if tokens.is_empty() || batch == 0 || !tokens.len().is_multiple_of(batch) {
        return Err(Error::NotDivisible(batch, tokens.len()));
    }
    let t = tokens.len() / batch;
    if t > cfg.seq_len {
        return Err(Error::InvalidConfig(format!(
            "sequence length {t} exceeds seq_len {}",
            cfg.seq_len
        )));
    }
    Ok(t)
}

/// Runs the model on `batch` sequences packed back to back in `tokens`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    tokens: &[usize],
    batch: usize,
    mode: Mode,
) -> Result<ForwardOutput> {
    check_tokens(cfg, tokens, batch)?;
    let mut x = g.gather_rows(vars.embed, tokens)?;
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let mut aux = Vec::with_capacity(cfg.n_layers);
    let mut z = Vec::with_capacity(cfg.n_layers);
    let mut decisions = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in vars.layers.iter().enumerate() {
        let dropout = match mode {
            Mode::Train { dropout_seed } if cfg.attn_dropout_p > 0.0 => Some((
                cfg.attn_dropout_p,
                dropout_seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(l as u64 + 1),
            )),
            _ => None,
        };
        let hn = g.layer_norm(x, layer.attn_norm.0, layer.attn_norm.1, eps)?;
        let a = causal_attention(g, hn, batch, &layer.attn, cfg, dropout)?;
        x = g.add(x, a)?;
        let hn = g.layer_norm(x, layer.moe_norm.0, layer.moe_norm.1, eps)?;
        let m = moe_forward(g, hn, &layer.experts, layer.router, &cfg.moe)?;
        x = g.add(x, m.output)?;
        aux.push(m.aux_loss);
        z.push(m.z_loss);
        decisions.push(m.decision);
    }
    let x = g.layer_norm(x, vars.final_norm.0, vars.final_norm.1, eps)?;
    let logits = match vars.unembed {
        Some(w) => g.matmul(x, w)?,
        None => {
            let w = g.transpose(vars.embed)?;
            g.matmul(x, w)?
        }
    };
    let inv = T::from_f64_lossy(1.0 / cfg.n_layers as f64);
    let aux_loss = layer_mean(g, &aux, inv)?;
    let z_loss = layer_mean(g, &z, inv)?;
    Ok(ForwardOutput {
        logits,
        aux_loss,
        z_loss,
        decisions,
    })
}

fn layer_mean<T: Real>(g: &mut Graph<T>, parts: &[Var], inv: T) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(g.scale(acc, inv))
}

/// Next-token training objective on top of [`forward`].
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// `task + aux_coeff · aux + z_coeff · z`
    pub total: Var,
    pub task: Var,
    pub aux: Var,
    pub z: Var,
    pub decisions: Vec<RoutingDecision>,
}

/// Cross-entropy of `inputs` predicting `targets` (same packing) plus the
/// router losses weighted by the config's coefficients.
pub fn loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
    mode: Mode,
) -> Result<LossOutput> {
    if inputs.len() != targets.len() {
        return Err(shape_err(
            "loss",
            format!("{} inputs, {} targets", inputs.len(), targets.len()),
        ));
    }
    let out = forward(g, cfg, vars, inputs, batch, mode)?;
    let task = g.cross_entropy(out.logits, targets)?;
    let a = g.scale(out.aux_loss, T::from_f64_lossy(cfg.moe.aux_coeff()));
    let zs = g.scale(out.z_loss, T::from_f64_lossy(cfg.moe.z_coeff()));
    let total = g.add(task, a)?;
    let total = g.add(total, zs)?;
    Ok(LossOutput {
        total,
        task,
        aux: out.aux_loss,
        z: out.z_loss,
        decisions: out.decisions,
    })
}
