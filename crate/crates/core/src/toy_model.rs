//! A small seeded causal transformer with an explicit per-layer KV cache.
//!
//! Architecture (identical for teacher and drafter, only sizes differ):
//!
//! ```text
//! x      = E[token] + sinusoid(position)
//! repeat num_layers:
//!   x   += Wo · MHA(norm(x) · {Wq, Wk, Wv}, cache, additive mask)
//!   x   += W2 · tanh(W1 · norm(x))
//! logits = norm(x) · Eᵀ
//! ```
//!
//! `norm` is a parameter-free layer norm (eps 1e-5). There are no biases.
//!
//! # Parameter generator
//!
//! Every weight tensor has a stable name (`embedding`, `layers.{i}.wq`, ...).
//! Its entries are drawn from a ChaCha8 stream keyed by `(seed, fnv1a64(name))`:
//! the 32-byte ChaCha key is four successive SplitMix64 outputs starting from
//! `seed ^ fnv1a64(name)`. Each entry consumes one `u64`, mapped to
//! `((u >> 11) · 2⁻⁵³) · 0.2 − 0.1`, i.e. uniform in `[−0.1, 0.1)`. Tensors
//! are filled row-major. Parameters are always generated in `f64` and then
//! rounded to the model's precision.

use std::marker::PhantomData;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::TreeMask;
use crate::real::{Precision, Real};
use crate::TokenId;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenRange { token: TokenId, vocab_size: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask row {slot} does not let the slot attend to itself")]
    MaskValidity { slot: usize },
    #[error("precision mismatch: config asks for {config:?}, model instantiated as {actual:?}")]
    Precision { config: Precision, actual: Precision },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// Default teacher: V=64, d=16, two layers, two heads.
    pub fn teacher(seed: u64) -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 32,
            seed,
            precision: Precision::Double,
        }
    }

    /// Default drafter: one layer, d=8, same vocabulary.
    pub fn drafter(seed: u64) -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            seed,
            precision: Precision::Double,
        }
    }

    /// The first `layers` layers of `teacher`. Parameters are keyed by name,
    /// so the embedding and shared layers are identical to the teacher's.
    pub fn early_exit(teacher: &ModelConfig, layers: usize) -> Self {
        Self {
            num_layers: layers,
            ..teacher.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 2 {
            return err(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return err("all dimensions must be >= 1".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    fn seeded(seed: u64, name: &str, rows: usize, cols: usize) -> Self {
        let mut stream = ParamStream::new(seed, name);
        let data = (0..rows * cols)
            .map(|_| T::from_f64_lossy(stream.next_uniform()))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = x · self`, with `x` of length `rows`.
    fn left_mul(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (i, &xi) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o = *o + xi * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_in: Matrix<T>,
    pub ffn_out: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// V × d, tied with the output projection.
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> ModelParams<T> {
    fn generate(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let embedding = Matrix::seeded(cfg.seed, "embedding", cfg.vocab_size, d);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let m = |name: &str, r, c| Matrix::seeded(cfg.seed, &format!("layers.{l}.{name}"), r, c);
                LayerParams {
                    wq: m("wq", d, d),
                    wk: m("wk", d, d),
                    wv: m("wv", d, d),
                    wo: m("wo", d, d),
                    ffn_in: m("ffn_in", d, cfg.ffn_dim),
                    ffn_out: m("ffn_out", cfg.ffn_dim, d),
                }
            })
            .collect();
        Self { embedding, layers }
    }

    fn tensors(&self) -> impl Iterator<Item = &Matrix<T>> {
        std::iter::once(&self.embedding).chain(
            self.layers
                .iter()
                .flat_map(|l| [&l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_in, &l.ffn_out]),
        )
    }
}

/// FNV-1a over the UTF-8 bytes of a parameter name.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha8 stream keyed by SplitMix64 expansion of a 64-bit key.
pub(crate) fn keyed_rng(key: u64) -> ChaCha8Rng {
    let mut state = key;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

struct ParamStream(ChaCha8Rng);

impl ParamStream {
    fn new(seed: u64, name: &str) -> Self {
        Self(keyed_rng(seed ^ fnv1a64(name.as_bytes())))
    }

    fn next_uniform(&mut self) -> f64 {
        let unit = (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        unit * 0.2 - 0.1
    }
}

/// Keys and values of one layer, one `embed_dim` row per cached position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv<T> {
    dim: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Real> LayerKv<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_flat(dim: usize, keys: Vec<T>, values: Vec<T>) -> Option<Self> {
        (dim > 0 && keys.len() == values.len() && keys.len().is_multiple_of(dim)).then_some(Self { dim, keys, values })
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn key(&self, pos: usize) -> &[T] {
        &self.keys[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn value(&self, pos: usize) -> &[T] {
        &self.values[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn keys(&self) -> &[T] {
        &self.keys
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn push(&mut self, key: &[T], value: &[T]) {
        assert_eq!(key.len(), self.dim);
        assert_eq!(value.len(), self.dim);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
    }

    pub fn truncate(&mut self, len: usize) {
        self.keys.truncate(len * self.dim);
        self.values.truncate(len * self.dim);
    }

    /// Contiguous copy of positions `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let (a, b) = (range.start * self.dim, range.end * self.dim);
        Self {
            dim: self.dim,
            keys: self.keys[a..b].to_vec(),
            values: self.values[a..b].to_vec(),
        }
    }

    pub fn extend_from(&mut self, other: &Self) {
        assert_eq!(self.dim, other.dim);
        self.keys.extend_from_slice(&other.keys);
        self.values.extend_from_slice(&other.values);
    }
}

/// Per-layer KV state. All layers always have the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    layers: Vec<LayerKv<T>>,
}

impl<T: Real> KvCache<T> {
    pub fn new(num_layers: usize, dim: usize) -> Self {
        Self {
            layers: (0..num_layers).map(|_| LayerKv::new(dim)).collect(),
        }
    }

    /// Builds a cache from layers, rejecting ragged or mixed-width input.
    pub fn from_layers(layers: Vec<LayerKv<T>>) -> Option<Self> {
        let first = layers.first()?;
        let (len, dim) = (first.len(), first.dim());
        layers
            .iter()
            .all(|l| l.len() == len && l.dim() == dim)
            .then_some(Self { layers })
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::dim)
    }

    pub fn layers(&self) -> &[LayerKv<T>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerKv<T> {
        &self.layers[i]
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerKv<T>] {
        &mut self.layers
    }

    pub fn truncate(&mut self, len: usize) {
        self.layers.iter_mut().for_each(|l| l.truncate(len));
    }

    /// Largest absolute elementwise difference, or `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.num_layers() != other.num_layers() || self.seq_len() != other.seq_len() {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.dim() != b.dim() {
                return None;
            }
            for (x, y) in a.keys.iter().chain(&a.values).zip(b.keys.iter().chain(&b.values)) {
                worst = worst.max((x.as_f64() - y.as_f64()).abs());
            }
        }
        Some(worst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    /// One vocabulary-sized score vector per evaluated slot.
    pub logits: Vec<Vec<T>>,
    pub new_cache_len: usize,
}

impl<T> StepOutput<T> {
    pub fn last(&self) -> &[T] {
        self.logits.last().expect("at least one slot")
    }
}

/// Immutable model: configuration plus generated parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: ModelParams<T>,
    _marker: PhantomData<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(ModelError::Precision {
                config: config.precision,
                actual: T::PRECISION,
            });
        }
        let params = ModelParams::generate(&config);
        Ok(Self {
            config,
            params,
            _marker: PhantomData,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn empty_cache(&self) -> KvCache<T> {
        KvCache::new(self.config.num_layers, self.config.embed_dim)
    }

    /// FNV-1a over the bit patterns of every parameter, in generation order.
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in self.params.tensors() {
            for x in &m.data {
                for b in x.as_f64().to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Feeds the whole prompt with a causal mask; returns next-token logits
    /// at the last prompt position.
    pub fn prefill(&self, prompt: &[TokenId], cache: &mut KvCache<T>) -> Result<StepOutput<T>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let base = cache.seq_len();
        let mask = TreeMask::causal(base, prompt.len());
        let positions: Vec<usize> = (base..base + prompt.len()).collect();
        let mut out = self.forward_masked_batch(prompt, cache, &mask, &positions)?;
        let last = out.logits.pop().expect("non-empty prompt");
        Ok(StepOutput {
            logits: vec![last],
            new_cache_len: out.new_cache_len,
        })
    }

    /// One autoregressive step at position `cache.seq_len()`.
    pub fn forward_step(&self, token: TokenId, cache: &mut KvCache<T>) -> Result<StepOutput<T>, ModelError> {
        let pos = cache.seq_len();
        let mask = TreeMask::causal(pos, 1);
        self.forward_masked_batch(&[token], cache, &mask, &[pos])
    }

    /// Evaluates `tokens` as new slots appended to `cache`.
    ///
    /// `mask` has `tokens.len()` rows and `cache.seq_len() + tokens.len()`
    /// columns. Columns holding the mask sentinel receive exactly zero
    /// attention weight. The cache is extended in slot order.
    pub fn forward_masked_batch(
        &self,
        tokens: &[TokenId],
        cache: &mut KvCache<T>,
        mask: &TreeMask<T>,
        positions: &[usize],
    ) -> Result<StepOutput<T>, ModelError> {
        let slots = tokens.len();
        if slots == 0 {
            return Err(ModelError::EmptyInput);
        }
        let prefix = cache.seq_len();
        if cache.num_layers() != self.config.num_layers || cache.dim() != self.config.embed_dim {
            return Err(ModelError::Shape(format!(
                "cache has {} layers of width {}, model expects {} of width {}",
                cache.num_layers(),
                cache.dim(),
                self.config.num_layers,
                self.config.embed_dim
            )));
        }
        if mask.rows() != slots || mask.cols() != prefix + slots {
            return Err(ModelError::Shape(format!(
                "mask is {}x{}, expected {}x{}",
                mask.rows(),
                mask.cols(),
                slots,
                prefix + slots
            )));
        }
        if positions.len() != slots {
            return Err(ModelError::Shape(format!(
                "{} positions for {} slots",
                positions.len(),
                slots
            )));
        }
        for &token in tokens {
            if token as usize >= self.config.vocab_size {
                return Err(ModelError::TokenRange {
                    token,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        if let Some(slot) = (0..slots).find(|&k| !mask.allows(k, prefix + k)) {
            return Err(ModelError::MaskValidity { slot });
        }

        let d = self.config.embed_dim;
        let mut hidden: Vec<Vec<T>> = tokens
            .iter()
            .zip(positions)
            .map(|(&tok, &pos)| {
                let mut x = self.params.embedding.row(tok as usize).to_vec();
                add_positional(&mut x, pos);
                x
            })
            .collect();

        let mut normed = vec![T::zero(); d];
        let mut q = vec![vec![T::zero(); d]; slots];
        let mut k = vec![T::zero(); d];
        let mut v = vec![T::zero(); d];
        let mut attn = vec![T::zero(); d];
        let mut proj = vec![T::zero(); d];
        let mut ffn = vec![T::zero(); self.config.ffn_dim];

        for (layer, kv) in self.params.layers.iter().zip(cache.layers_mut()) {
            for (x, qk) in hidden.iter().zip(q.iter_mut()) {
                layer_norm(x, &mut normed);
                layer.wq.left_mul(&normed, qk);
                layer.wk.left_mul(&normed, &mut k);
                layer.wv.left_mul(&normed, &mut v);
                kv.push(&k, &v);
            }
            for (slot, x) in hidden.iter_mut().enumerate() {
                self.attend(&q[slot], kv, mask.row(slot), &mut attn);
                layer.wo.left_mul(&attn, &mut proj);
                add_assign(x, &proj);

                layer_norm(x, &mut normed);
                layer.ffn_in.left_mul(&normed, &mut ffn);
                ffn.iter_mut().for_each(|f| *f = f.tanh());
                layer.ffn_out.left_mul(&ffn, &mut proj);
                add_assign(x, &proj);
            }
        }

        let logits = hidden
            .iter()
            .map(|x| {
                layer_norm(x, &mut normed);
                (0..self.config.vocab_size)
                    .map(|tok| dot(&normed, self.params.embedding.row(tok)))
                    .collect()
            })
            .collect();
        Ok(StepOutput {
            logits,
            new_cache_len: cache.seq_len(),
        })
    }

    fn attend(&self, q: &[T], kv: &LayerKv<T>, mask_row: &[T], out: &mut [T]) {
        let hd = self.config.head_dim();
        let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let neg = T::mask_neg();
        let cols = mask_row.len();
        let mut weights = vec![T::zero(); cols];
        out.iter_mut().for_each(|o| *o = T::zero());
        for h in 0..self.config.num_heads {
            let span = h * hd..(h + 1) * hd;
            let qh = &q[span.clone()];
            let mut max = neg;
            for (j, (w, &m)) in weights.iter_mut().zip(mask_row).enumerate() {
                *w = if m <= neg {
                    neg
                } else {
                    dot(qh, &kv.key(j)[span.clone()]) * scale + m
                };
                if *w > max {
                    max = *w;
                }
            }
            let mut denom = T::zero();
            let oh = &mut out[span.clone()];
            for (j, &w) in weights.iter().enumerate() {
                if w <= neg {
                    continue;
                }
                let e = (w - max).exp();
                denom = denom + e;
                for (o, &val) in oh.iter_mut().zip(&kv.value(j)[span.clone()]) {
                    *o = *o + e * val;
                }
            }
            oh.iter_mut().for_each(|o| *o = *o / denom);
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn add_assign<T: Real>(x: &mut [T], y: &[T]) {
    x.iter_mut().zip(y).for_each(|(a, &b)| *a = *a + b);
}

fn layer_norm<T: Real>(x: &[T], out: &mut [T]) {
    let n = T::from_usize(x.len()).expect("small dim");
    let mean = x.iter().fold(T::zero(), |a, &b| a + b) / n;
    let var = x.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
    let inv = T::one() / (var + T::from_f64_lossy(NORM_EPS)).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
}

fn add_positional<T: Real>(x: &mut [T], pos: usize) {
    let d = x.len() as f64;
    for (i, v) in x.iter_mut().enumerate() {
        let freq = 10000f64.powf(-((2 * (i / 2)) as f64) / d);
        let angle = pos as f64 * freq;
        let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        *v = *v + T::from_f64_lossy(pe);
    }
}
