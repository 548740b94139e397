//! Dense reference attention (MHA and GQA) for prefill and KV-cache decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, row_softmax, Matrix};

/// Layer/head layout of a model. Heads `h` with equal `h / gqa_group_size`
/// share one K/V head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub gqa_group_size: usize,
}

impl ModelGeometry {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize, gqa_group_size: usize) -> Result<Self> {
        let g = Self {
            num_layers,
            num_heads,
            head_dim,
            hidden_dim: num_heads * head_dim,
            gqa_group_size,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidGeometry(msg));
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 || self.gqa_group_size == 0 {
            return fail(format!("all dimensions must be positive: {self:?}"));
        }
        if self.num_heads % self.gqa_group_size != 0 {
            return fail(format!(
                "{} heads are not divisible into groups of {}",
                self.num_heads, self.gqa_group_size
            ));
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return fail(format!(
                "hidden_dim {} != num_heads {} x head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn num_kv_heads(&self) -> usize {
        self.num_heads / self.gqa_group_size
    }

    #[inline]
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.gqa_group_size
    }

    /// Query heads reading K/V head `kv_head`.
    pub fn group_heads(&self, kv_head: usize) -> std::ops::Range<usize> {
        kv_head * self.gqa_group_size..(kv_head + 1) * self.gqa_group_size
    }
}

/// Scaling by `1/sqrt(d)` and causal masking. Both are on for real inference;
/// `simplified()` mirrors the bare `A = QKᵀ` form used in unit tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionOptions {
    pub scaled: bool,
    pub causal: bool,
}

impl AttentionOptions {
    pub const fn standard() -> Self {
        Self { scaled: true, causal: true }
    }

    pub const fn simplified() -> Self {
        Self { scaled: false, causal: false }
    }

    #[inline]
    pub fn scale_for(&self, head_dim: usize) -> f64 {
        if self.scaled {
            1.0 / (head_dim as f64).sqrt()
        } else {
            1.0
        }
    }
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self::standard()
    }
}

/// Where an attention row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionRowContext {
    pub layer: usize,
    pub head: usize,
    /// Sequence position; the row attends to `row_id + 1` tokens.
    pub row_id: usize,
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// Pre-softmax scores, masked entries set to `-inf`.
    pub a: Matrix,
    /// Row-softmax of `a`.
    pub s: Matrix,
    /// `s · V`.
    pub p: Matrix,
}

/// `A = QKᵀ/sqrt(d)` with the upper triangle masked, `S = softmax(A)`, `P = SV`.
pub fn prefill_attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Result<PrefillOutput> {
    prefill_attention_with(q, k, v, AttentionOptions { scaled: true, causal })
}

pub fn prefill_attention_with(q: &Matrix, k: &Matrix, v: &Matrix, opts: AttentionOptions) -> Result<PrefillOutput> {
    let a = attention_scores(q, k, opts)?;
    if v.rows() != k.rows() {
        return Err(Error::DimensionMismatch(format!(
            "V has {} rows but K has {}",
            v.rows(),
            k.rows()
        )));
    }
    let mut s = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let visible = if opts.causal { r + 1 } else { a.cols() };
        s.row_mut(r)[..visible].copy_from_slice(&row_softmax(&a.row(r)[..visible])?);
    }
    let p = s.matmul(v)?;
    Ok(PrefillOutput { a, s, p })
}

/// Scaled and (optionally) causally masked `QKᵀ`.
pub fn attention_scores(q: &Matrix, k: &Matrix, opts: AttentionOptions) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::DimensionMismatch(format!(
            "Q has {} columns but K has {}",
            q.cols(),
            k.cols()
        )));
    }
    if opts.causal && q.rows() != k.rows() {
        return Err(Error::DimensionMismatch(format!(
            "causal attention needs equal Q/K row counts, got {} and {}",
            q.rows(),
            k.rows()
        )));
    }
    let mut a = q.matmul_transposed(k)?;
    a.scale(opts.scale_for(q.cols()));
    if opts.causal {
        for r in 0..a.rows() {
            a.row_mut(r)[r + 1..].fill(f64::NEG_INFINITY);
        }
    }
    Ok(a)
}

/// Read access to value rows. The sparse paths gather through this trait
/// so V traffic can be observed.
pub trait ValueRows {
    fn num_rows(&self) -> usize;
    fn value_row(&self, i: usize) -> &[f64];
}

/// The first `len` rows of a matrix, i.e. the V rows visible to causal row `len - 1`.
#[derive(Debug, Clone, Copy)]
pub struct PrefixRows<'a> {
    matrix: &'a Matrix,
    len: usize,
}

impl<'a> PrefixRows<'a> {
    pub fn new(matrix: &'a Matrix, len: usize) -> Self {
        assert!(len <= matrix.rows());
        Self { matrix, len }
    }
}

impl ValueRows for PrefixRows<'_> {
    fn num_rows(&self) -> usize {
        self.len
    }

    fn value_row(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.len);
        self.matrix.row(i)
    }
}

/// K/V history of one KV head, with the running mean of all V rows.
#[derive(Debug, Clone)]
pub struct KvHead {
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    v_mean: Vec<f64>,
    len: usize,
}

impl KvHead {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
            v_mean: vec![0.0; head_dim],
            len: 0,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    pub fn key_row(&self, i: usize) -> &[f64] {
        &self.keys[i * self.head_dim..(i + 1) * self.head_dim]
    }

    /// Mean of every V row appended so far.
    #[inline]
    pub fn v_mean(&self) -> &[f64] {
        &self.v_mean
    }

    pub fn append(&mut self, k_new: &[f64], v_new: &[f64]) -> Result<()> {
        if k_new.len() != self.head_dim || v_new.len() != self.head_dim {
            return Err(Error::DimensionMismatch(format!(
                "k/v rows of length {}/{} for head_dim {}",
                k_new.len(),
                v_new.len(),
                self.head_dim
            )));
        }
        self.keys.extend_from_slice(k_new);
        self.values.extend_from_slice(v_new);
        self.len += 1;
        let inv = 1.0 / self.len as f64;
        for (m, &v) in self.v_mean.iter_mut().zip(v_new) {
            *m += (v - *m) * inv;
        }
        Ok(())
    }

    /// Scaled scores of `q` against every cached key.
    pub fn scores(&self, q: &[f64], opts: AttentionOptions) -> Result<Vec<f64>> {
        if q.len() != self.head_dim {
            return Err(Error::DimensionMismatch(format!(
                "query of length {} for head_dim {}",
                q.len(),
                self.head_dim
            )));
        }
        let scale = opts.scale_for(self.head_dim);
        Ok((0..self.len).map(|i| dot(q, self.key_row(i)) * scale).collect())
    }
}

impl ValueRows for KvHead {
    fn num_rows(&self) -> usize {
        self.len
    }

    fn value_row(&self, i: usize) -> &[f64] {
        &self.values[i * self.head_dim..(i + 1) * self.head_dim]
    }
}

/// Per-(layer, kv-head) caches. Query heads of one GQA group resolve to the
/// same `KvHead` object.
#[derive(Debug, Clone)]
pub struct KvCache {
    geometry: ModelGeometry,
    heads: Vec<KvHead>,
}

impl KvCache {
    pub fn new(geometry: ModelGeometry) -> Self {
        let heads = (0..geometry.num_layers * geometry.num_kv_heads())
            .map(|_| KvHead::new(geometry.head_dim))
            .collect();
        Self { geometry, heads }
    }

    pub fn geometry(&self) -> &ModelGeometry {
        &self.geometry
    }

    fn slot(&self, layer: usize, kv_head: usize) -> usize {
        assert!(layer < self.geometry.num_layers && kv_head < self.geometry.num_kv_heads());
        layer * self.geometry.num_kv_heads() + kv_head
    }

    pub fn kv_head(&self, layer: usize, kv_head: usize) -> &KvHead {
        &self.heads[self.slot(layer, kv_head)]
    }

    pub fn kv_head_mut(&mut self, layer: usize, kv_head: usize) -> &mut KvHead {
        let slot = self.slot(layer, kv_head);
        &mut self.heads[slot]
    }

    /// The K/V head query head `head` reads.
    pub fn for_query_head(&self, layer: usize, head: usize) -> &KvHead {
        self.kv_head(layer, self.geometry.kv_head_of(head))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub a: Vec<f64>,
    pub s: Vec<f64>,
    pub p: Vec<f64>,
}

/// Dense attention of `q` over everything in `cache`.
pub fn attend(cache: &KvHead, q: &[f64], opts: AttentionOptions) -> Result<DecodeOutput> {
    let a = cache.scores(q, opts)?;
    let s = row_softmax(&a)?;
    let mut p = vec![0.0; cache.head_dim()];
    for (i, &w) in s.iter().enumerate() {
        for (o, &v) in p.iter_mut().zip(cache.value_row(i)) {
            *o += w * v;
        }
    }
    Ok(DecodeOutput { a, s, p })
}

/// Append one token's K/V and attend with its query.
pub fn decode_step(
    cache: &mut KvHead,
    q: &[f64],
    k_new: &[f64],
    v_new: &[f64],
    opts: AttentionOptions,
) -> Result<DecodeOutput> {
    if q.len() != cache.head_dim() {
        return Err(Error::DimensionMismatch(format!(
            "query of length {} for head_dim {}",
            q.len(),
            cache.head_dim()
        )));
    }
    cache.append(k_new, v_new)?;
    attend(cache, q, opts)
}
