//! Byte-level decoder-only transformer with a swappable attention regime.
//!
//! Pre-norm blocks: `h = x + Attn(RMSNorm(x))`, `x' = h + W2·GELU(W1·RMSNorm(h))`
//! with a 4× feed-forward expansion, no biases, untied embeddings, and RoPE
//! on the per-head queries and keys. Training always runs at positions
//! `0..c` (see [`crate::train`]); the attention mode only changes at
//! inference time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_weights, multi_head_attention, AttentionInputs, AttentionMode, AttentionParams,
    DcaKvCache, Kernel,
};
use crate::error::{Error, Result};
use crate::rope::{RotaryTable, DEFAULT_BASE};
use crate::schedules::ChunkConfig;
use crate::tensor::{Matrix, Real};

pub const VOCAB: usize = 256;
pub(crate) const NORM_EPS: f64 = 1e-5;
const ROTARY_CACHE: usize = 2048;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Pretraining context window `c`.
    pub train_context: usize,
    pub seed: u64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: VOCAB,
            model_dim: 128,
            heads: 4,
            layers: 4,
            train_context: 128,
            seed: 0,
            rope_base: DEFAULT_BASE,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ModelConfig(msg));
        if self.vocab != VOCAB {
            return bad(format!("vocab must be {VOCAB}, got {}", self.vocab));
        }
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 {
            return bad("model_dim, heads and layers must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head_dim {} must be even", self.head_dim()));
        }
        if self.train_context < 2 {
            return bad(format!("train_context {} must be ≥ 2", self.train_context));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad(format!("rope_base {} must be > 1", self.rope_base));
        }
        Ok(())
    }

    /// Closed-form parameter count: embeddings in and out, per-layer norms
    /// and projections, final norm.
    pub fn param_count(&self) -> usize {
        let d = self.model_dim;
        2 * self.vocab * d + self.layers * (2 * d + 4 * d * d + 2 * d * self.ffn_dim()) + d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w1: usize,
    pub w2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Where each tensor lives inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub embed: usize,
    pub layers: Vec<LayerOffsets>,
    pub final_norm: usize,
    pub unembed: usize,
    pub total: usize,
    pub tensors: Vec<TensorSpec>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.model_dim, cfg.ffn_dim(), cfg.vocab);
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset
        };
        let embed = add("embed".into(), vec![v, d]);
        let layers = (0..cfg.layers)
            .map(|l| LayerOffsets {
                attn_norm: add(format!("layers.{l}.attn_norm"), vec![d]),
                wq: add(format!("layers.{l}.wq"), vec![d, d]),
                wk: add(format!("layers.{l}.wk"), vec![d, d]),
                wv: add(format!("layers.{l}.wv"), vec![d, d]),
                wo: add(format!("layers.{l}.wo"), vec![d, d]),
                mlp_norm: add(format!("layers.{l}.mlp_norm"), vec![d]),
                w1: add(format!("layers.{l}.w1"), vec![d, f]),
                w2: add(format!("layers.{l}.w2"), vec![f, d]),
            })
            .collect();
        let final_norm = add("final_norm".into(), vec![d]);
        let unembed = add("unembed".into(), vec![d, v]);
        Self {
            embed,
            layers,
            final_norm,
            unembed,
            total,
            tensors,
        }
    }
}

/// Model config, flat parameters and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Vec<f32>,
    pub step: u64,
    pub corpus_fingerprint: [u8; 32],
}

impl ModelCheckpoint {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }
}

/// Scaled-uniform initialization.
///
/// Matrices draw from `U(−a, a)` with `a = √(3 / fan_in)` (unit-variance
/// outputs for unit-variance inputs); `wo` and `w2` are further scaled by
/// `1/√(2·layers)`. Embeddings draw from `U(−√3, √3)`; norm gains start at 1.
/// Tensors are filled in layout order from a ChaCha8 stream seeded by `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0f32; layout.total];
    let residual_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
    for spec in &layout.tensors {
        let slot = &mut params[spec.offset..spec.offset + spec.numel()];
        let is_norm = spec.name.ends_with("norm");
        if is_norm {
            slot.fill(1.0);
            continue;
        }
        let bound = if spec.name == "embed" {
            3f64.sqrt()
        } else {
            let fan_in = spec.shape[0] as f64;
            let mut a = (3.0 / fan_in).sqrt();
            if spec.name.ends_with(".wo") || spec.name.ends_with(".w2") {
                a *= residual_scale;
            }
            a
        };
        for p in slot.iter_mut() {
            *p = rng.gen_range(-bound..bound) as f32;
        }
    }
    let config = ModelConfig {
        seed,
        ..cfg.clone()
    };
    Ok(ModelCheckpoint {
        config,
        params,
        step: 0,
        corpus_fingerprint: [0; 32],
    })
}

/// In-place RMS normalization of each row; returns the per-row `1/rms`.
pub(crate) fn rms_norm_rows<T: Real>(x: &[T], gain: &[T], out: &mut [T]) -> Vec<T> {
    let d = gain.len();
    let eps = T::of(NORM_EPS);
    x.chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .map(|(row, o)| {
            let ms = row.iter().map(|v| *v * *v).sum::<T>() / T::of(d as f64);
            let inv = T::one() / (ms + eps).sqrt();
            for ((o, v), g) in o.iter_mut().zip(row).zip(gain) {
                *o = *v * inv * *g;
            }
            inv
        })
        .collect()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(u: T) -> T {
    let inner = T::of(GELU_K) * (u + T::of(GELU_C) * u * u * u);
    T::of(0.5) * u * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(u: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let t = (k * (u + c * u * u * u)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * u * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * u * u)
}

struct Layer {
    attn_norm: Vec<f32>,
    attn: AttentionParams<f32>,
    mlp_norm: Vec<f32>,
    w1: Matrix<f32>,
    w2: Matrix<f32>,
}

/// Inference view of a checkpoint.
pub struct ToyModel {
    config: ModelConfig,
    embed: Matrix<f32>,
    layers: Vec<Layer>,
    final_norm: Vec<f32>,
    unembed: Matrix<f32>,
    table: RotaryTable,
}

impl ToyModel {
    pub fn new(ckpt: &ModelCheckpoint) -> Result<Self> {
        let cfg = &ckpt.config;
        cfg.validate()?;
        let layout = Layout::new(cfg);
        if ckpt.params.len() != layout.total {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint has {} parameters, config implies {}",
                ckpt.params.len(),
                layout.total
            )));
        }
        let (d, f, v) = (cfg.model_dim, cfg.ffn_dim(), cfg.vocab);
        let p = &ckpt.params;
        let mat = |off: usize, rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, p[off..off + rows * cols].to_vec())
        };
        let vec = |off: usize| p[off..off + d].to_vec();
        let layers = layout
            .layers
            .iter()
            .map(|o| {
                Ok(Layer {
                    attn_norm: vec(o.attn_norm),
                    attn: AttentionParams {
                        wq: mat(o.wq, d, d)?,
                        wk: mat(o.wk, d, d)?,
                        wv: mat(o.wv, d, d)?,
                        wo: mat(o.wo, d, d)?,
                    },
                    mlp_norm: vec(o.mlp_norm),
                    w1: mat(o.w1, d, f)?,
                    w2: mat(o.w2, f, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            embed: mat(layout.embed, v, d)?,
            layers,
            final_norm: vec(layout.final_norm),
            unembed: mat(layout.unembed, d, v)?,
            table: RotaryTable::new(cfg.head_dim(), cfg.rope_base, ROTARY_CACHE)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Chunk config for chunked modes, or the model's own window for PI.
    fn resolve_cfg(&self, mode: AttentionMode, cfg: Option<&ChunkConfig>) -> Result<Option<ChunkConfig>> {
        match (mode, cfg) {
            (_, Some(c)) => Ok(Some(*c)),
            (AttentionMode::Pi, None) => Ok(Some(ChunkConfig {
                chunk: 1,
                context: self.config.train_context,
                window: 0,
            })),
            (m, None) if m.is_chunked() => Err(Error::MissingChunkConfig(m)),
            _ => Ok(None),
        }
    }

    fn embed_tokens(&self, tokens: &[u8]) -> Result<Matrix<f32>> {
        if tokens.is_empty() {
            return Err(Error::Degenerate("empty token sequence"));
        }
        let d = self.config.model_dim;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, t) in tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.embed.row(*t as usize));
        }
        Ok(x)
    }

    fn norm(x: &Matrix<f32>, gain: &[f32]) -> Matrix<f32> {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        rms_norm_rows(x.as_slice(), gain, out.as_mut_slice());
        out
    }

    fn mlp(&self, layer: &Layer, h: &Matrix<f32>) -> Result<Matrix<f32>> {
        let mut u = Self::norm(h, &layer.mlp_norm).matmul(&layer.w1)?;
        for x in u.as_mut_slice() {
            *x = gelu(*x);
        }
        u.matmul(&layer.w2)
    }

    fn block(
        &self,
        layer: &Layer,
        x: &Matrix<f32>,
        mode: AttentionMode,
        cfg: Option<&ChunkConfig>,
        kernel: Kernel,
    ) -> Result<Matrix<f32>> {
        let n = Self::norm(x, &layer.attn_norm);
        let a = multi_head_attention(&n, &layer.attn, self.config.heads, mode, cfg, &self.table, kernel)?;
        let mut h = x.clone();
        add_assign(&mut h, &a);
        let m = self.mlp(layer, &h)?;
        add_assign(&mut h, &m);
        Ok(h)
    }

    fn logits_from(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        Self::norm(x, &self.final_norm).matmul(&self.unembed)
    }

    /// Next-byte logits, `l × 256`, using the chunked kernel.
    pub fn forward(&self, tokens: &[u8], mode: AttentionMode, cfg: Option<&ChunkConfig>) -> Result<Matrix<f32>> {
        self.forward_with(tokens, mode, cfg, Kernel::Chunked)
    }

    pub fn forward_with(
        &self,
        tokens: &[u8],
        mode: AttentionMode,
        cfg: Option<&ChunkConfig>,
        kernel: Kernel,
    ) -> Result<Matrix<f32>> {
        let cfg = self.resolve_cfg(mode, cfg)?;
        let mut x = self.embed_tokens(tokens)?;
        for layer in &self.layers {
            x = self.block(layer, &x, mode, cfg.as_ref(), kernel)?;
        }
        self.logits_from(&x)
    }

    /// Softmax weights of one head in one layer, from the brute-force route.
    pub fn attention_weights(
        &self,
        tokens: &[u8],
        layer: usize,
        head: usize,
        mode: AttentionMode,
        cfg: Option<&ChunkConfig>,
    ) -> Result<Matrix<f32>> {
        if layer >= self.layers.len() || head >= self.config.heads {
            return Err(Error::InvalidArgument(format!("no layer {layer} head {head}")));
        }
        let cfg = self.resolve_cfg(mode, cfg)?;
        let mut x = self.embed_tokens(tokens)?;
        for l in &self.layers[..layer] {
            x = self.block(l, &x, mode, cfg.as_ref(), Kernel::Chunked)?;
        }
        let l = &self.layers[layer];
        let n = Self::norm(&x, &l.attn_norm);
        let hd = self.config.head_dim();
        let cols = head * hd;
        let inputs = AttentionInputs::new(
            n.matmul(&l.attn.wq)?.column_block(cols, hd),
            n.matmul(&l.attn.wk)?.column_block(cols, hd),
            n.matmul(&l.attn.wv)?.column_block(cols, hd),
        )?;
        attention_weights(&inputs, mode, cfg.as_ref(), &self.table)
    }

    /// Incremental decoder. `max_len` fixes the PI scale factor.
    pub fn session(&self, mode: AttentionMode, cfg: Option<&ChunkConfig>, max_len: usize) -> Result<DecodeSession<'_>> {
        let cfg = self.resolve_cfg(mode, cfg)?;
        let caches = (0..self.layers.len())
            .map(|_| {
                (0..self.config.heads)
                    .map(|_| DcaKvCache::new(mode, cfg.as_ref(), self.config.head_dim(), max_len))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodeSession { model: self, caches })
    }

    /// Greedy continuation of `prompt` by `n` bytes via the KV cache.
    pub fn generate_greedy(
        &self,
        prompt: &[u8],
        n: usize,
        mode: AttentionMode,
        cfg: Option<&ChunkConfig>,
    ) -> Result<Vec<u8>> {
        if prompt.is_empty() {
            return Err(Error::Degenerate("empty prompt"));
        }
        let mut session = self.session(mode, cfg, prompt.len() + n)?;
        let mut logits = Vec::new();
        for &t in prompt {
            logits = session.push(t)?;
        }
        let mut out = Vec::with_capacity(n);
        for step in 0..n {
            let next = argmax(&logits) as u8;
            out.push(next);
            if step + 1 < n {
                logits = session.push(next)?;
            }
        }
        Ok(out)
    }
}

fn add_assign(a: &mut Matrix<f32>, b: &Matrix<f32>) {
    for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += *y;
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-layer, per-head KV caches over a [`ToyModel`].
pub struct DecodeSession<'a> {
    model: &'a ToyModel,
    caches: Vec<Vec<DcaKvCache<f32>>>,
}

impl DecodeSession<'_> {
    pub fn len(&self) -> usize {
        self.caches[0][0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feeds one token and returns the next-byte logits.
    pub fn push(&mut self, token: u8) -> Result<Vec<f32>> {
        let model = self.model;
        let hd = model.config.head_dim();
        let mut x = model.embed_tokens(&[token])?;
        for (layer, caches) in model.layers.iter().zip(self.caches.iter_mut()) {
            let n = ToyModel::norm(&x, &layer.attn_norm);
            let q = n.matmul(&layer.attn.wq)?;
            let k = n.matmul(&layer.attn.wk)?;
            let v = n.matmul(&layer.attn.wv)?;
            let mut concat = Matrix::zeros(1, model.config.model_dim);
            for (h, cache) in caches.iter_mut().enumerate() {
                let r = h * hd..(h + 1) * hd;
                let out = cache.step(&q.row(0)[r.clone()], &k.row(0)[r.clone()], &v.row(0)[r.clone()], &model.table)?;
                concat.row_mut(0)[r].copy_from_slice(&out);
            }
            let a = concat.matmul(&layer.attn.wo)?;
            add_assign(&mut x, &a);
            let m = model.mlp(layer, &x)?;
            add_assign(&mut x, &m);
        }
        Ok(model.logits_from(&x)?.into_vec())
    }
}
