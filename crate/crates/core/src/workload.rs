//! Seeded synthetic workloads.
//!
//! Two kinds are supported:
//! - `toy-model`: a random-weight attention stack. Each layer projects the
//!   residual stream into per-head Q and per-KV-head K/V, attends, adds the
//!   concatenated head outputs back and RMS-normalizes. Later layers therefore
//!   see whatever sparsification earlier layers applied.
//! - `direct-stream`: i.i.d. normal Q/K/V per layer, no mixing between layers.
//!
//! Samples are lightweight descriptors; their tensors are regenerated from
//! `(seed, index)` on demand, so a stream of hundreds of long sequences costs
//! nothing until it is walked.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionOptions, KvCache, ModelGeometry};
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    ToyModel,
    DirectStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqLenRange {
    pub min: usize,
    pub max: usize,
}

/// Workload description, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub seed: u64,
    pub geometry: ModelGeometry,
    pub num_samples: usize,
    pub seq_len: SeqLenRange,
    /// Share of samples routed to the calibration stream, in (0, 1).
    pub calibration_fraction: f64,
    /// Multiplier on the logits of layer 0.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    /// Relative logit-scale growth from the first to the last layer. Positive
    /// values make deeper layers sharper (lower softmax entropy).
    #[serde(default = "default_entropy_skew")]
    pub entropy_skew: f64,
    /// Correlation of query projections within one GQA group, in [0, 1].
    #[serde(default = "default_head_correlation")]
    pub head_correlation: f64,
}

fn default_logit_scale() -> f64 {
    1.0
}

fn default_entropy_skew() -> f64 {
    1.0
}

fn default_head_correlation() -> f64 {
    0.7
}

impl Default for WorkloadSpec {
    /// Desk-scale default: 4 layers, 8 heads in groups of 4, d = 32.
    fn default() -> Self {
        Self {
            kind: WorkloadKind::ToyModel,
            seed: 0x7e7a,
            geometry: ModelGeometry::new(4, 8, 32, 4).expect("valid default geometry"),
            num_samples: 320,
            seq_len: SeqLenRange { min: 160, max: 512 },
            calibration_fraction: 0.8,
            logit_scale: default_logit_scale(),
            entropy_skew: default_entropy_skew(),
            head_correlation: default_head_correlation(),
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidWorkload(msg));
        self.geometry.validate()?;
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return fail(format!(
                "calibration_fraction must lie in (0, 1), got {}",
                self.calibration_fraction
            ));
        }
        if self.seq_len.min == 0 || self.seq_len.min > self.seq_len.max {
            return fail(format!("bad sequence length range {:?}", self.seq_len));
        }
        if self.num_samples < 2 {
            return fail("need at least two samples to split".into());
        }
        if !(0.0..=1.0).contains(&self.head_correlation) {
            return fail(format!("head_correlation must lie in [0, 1], got {}", self.head_correlation));
        }
        if !self.logit_scale.is_finite() || self.logit_scale <= 0.0 {
            return fail(format!("logit_scale must be positive, got {}", self.logit_scale));
        }
        if !self.entropy_skew.is_finite() || self.entropy_skew <= -1.0 {
            return fail(format!("entropy_skew must exceed -1, got {}", self.entropy_skew));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidWorkload(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("workload spec always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Logit multiplier of `layer`, interpolated linearly across depth.
    pub fn layer_logit_scale(&self, layer: usize) -> f64 {
        let depth = if self.geometry.num_layers > 1 {
            layer as f64 / (self.geometry.num_layers - 1) as f64
        } else {
            0.0
        };
        self.logit_scale * (1.0 + self.entropy_skew * depth)
    }
}

/// One input sequence; tensors are derived from `(workload seed, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sample {
    pub index: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Streams {
    pub calibration: Vec<Sample>,
    pub evaluation: Vec<Sample>,
}

/// Split the workload's samples into disjoint calibration and evaluation streams.
pub fn generate(spec: &WorkloadSpec, seed: u64) -> Result<Streams> {
    spec.validate()?;
    let mut rng = stream_rng(seed, LENGTH_STREAM);
    let samples: Vec<Sample> = (0..spec.num_samples)
        .map(|index| Sample {
            index,
            seq_len: rng.random_range(spec.seq_len.min..=spec.seq_len.max),
        })
        .collect();
    let n_cal = (spec.calibration_fraction * spec.num_samples as f64).round() as usize;
    if n_cal == 0 || n_cal == spec.num_samples {
        return Err(Error::InvalidWorkload(format!(
            "calibration_fraction {} leaves an empty stream out of {} samples",
            spec.calibration_fraction, spec.num_samples
        )));
    }
    let mut order: Vec<usize> = (0..spec.num_samples).collect();
    order.shuffle(&mut rng);
    let (cal, eval) = order.split_at(n_cal);
    let mut calibration: Vec<Sample> = cal.iter().map(|&i| samples[i]).collect();
    let mut evaluation: Vec<Sample> = eval.iter().map(|&i| samples[i]).collect();
    calibration.sort_by_key(|s| s.index);
    evaluation.sort_by_key(|s| s.index);
    Ok(Streams { calibration, evaluation })
}

const LENGTH_STREAM: u64 = 0;
const WEIGHT_STREAM: u64 = 1;
const SAMPLE_STREAM_BASE: u64 = 16;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

/// `sqrt(rho)·shared + sqrt(1-rho)·own`, elementwise.
fn blend(shared: &Matrix, own: &Matrix, rho: f64) -> Matrix {
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let data = shared.data().iter().zip(own.data()).map(|(s, o)| a * s + b * o).collect();
    Matrix::from_vec(shared.rows(), shared.cols(), data).expect("same shape")
}

/// Random projection weights of the toy stack, each `D x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub geometry: ModelGeometry,
    pub seed: u64,
    /// `[layer][head]`, already scaled by the layer's logit multiplier.
    pub w_q: Vec<Vec<Matrix>>,
    /// `[layer][kv_head]`.
    pub w_k: Vec<Vec<Matrix>>,
    /// `[layer][kv_head]`.
    pub w_v: Vec<Vec<Matrix>>,
}

impl ToyModel {
    pub fn generate(spec: &WorkloadSpec, seed: u64) -> Self {
        let g = spec.geometry;
        let mut rng = stream_rng(seed, WEIGHT_STREAM);
        let std = 1.0 / (g.hidden_dim as f64).sqrt();
        let mut w_q = Vec::with_capacity(g.num_layers);
        let mut w_k = Vec::with_capacity(g.num_layers);
        let mut w_v = Vec::with_capacity(g.num_layers);
        for layer in 0..g.num_layers {
            let scale = spec.layer_logit_scale(layer);
            let mut q_heads = Vec::with_capacity(g.num_heads);
            for _ in 0..g.num_kv_heads() {
                let shared = normal_matrix(&mut rng, g.hidden_dim, g.head_dim, std);
                for _ in 0..g.gqa_group_size {
                    let own = normal_matrix(&mut rng, g.hidden_dim, g.head_dim, std);
                    let mut w = blend(&shared, &own, spec.head_correlation);
                    w.scale(scale);
                    q_heads.push(w);
                }
            }
            w_q.push(q_heads);
            w_k.push((0..g.num_kv_heads()).map(|_| normal_matrix(&mut rng, g.hidden_dim, g.head_dim, std)).collect());
            w_v.push((0..g.num_kv_heads()).map(|_| normal_matrix(&mut rng, g.hidden_dim, g.head_dim, std)).collect());
        }
        Self { geometry: g, seed, w_q, w_k, w_v }
    }
}

/// Q per query head and K/V per KV head for one layer of one sample.
#[derive(Debug, Clone)]
pub struct LayerInputs {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// Prefill-time attention for one layer: returns one `n x d` output per query head.
pub trait LayerAttention {
    fn attend_layer(&mut self, layer: usize, inputs: &LayerInputs, geometry: &ModelGeometry) -> Result<Vec<Matrix>>;
}

/// Decode-time attention for one layer and token: `cache` already holds the
/// token's K/V; returns one output row per query head.
pub trait TokenAttention {
    fn attend_token(
        &mut self,
        layer: usize,
        cache: &KvCache,
        queries: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>>;
}

/// A workload ready to run: spec, effective seed and (for toy models) weights.
#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub seed: u64,
    model: Option<ToyModel>,
}

impl Workload {
    pub fn new(spec: WorkloadSpec) -> Result<Self> {
        let seed = spec.seed;
        Self::with_seed(spec, seed)
    }

    pub fn with_seed(spec: WorkloadSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let model = match spec.kind {
            WorkloadKind::ToyModel => Some(ToyModel::generate(&spec, seed)),
            WorkloadKind::DirectStream => None,
        };
        Ok(Self { spec, seed, model })
    }

    pub fn geometry(&self) -> &ModelGeometry {
        &self.spec.geometry
    }

    pub fn model(&self) -> Option<&ToyModel> {
        self.model.as_ref()
    }

    pub fn streams(&self) -> Result<Streams> {
        generate(&self.spec, self.seed)
    }

    pub fn attention_options(&self) -> AttentionOptions {
        AttentionOptions::standard()
    }

    fn sample_rng(&self, sample: &Sample) -> ChaCha8Rng {
        stream_rng(self.seed, SAMPLE_STREAM_BASE + sample.index as u64)
    }

    /// Token embeddings of a toy-model sample (`n x D`, RMS-normalized rows).
    pub fn embeddings(&self, sample: &Sample) -> Matrix {
        let mut x = normal_matrix(&mut self.sample_rng(sample), sample.seq_len, self.spec.geometry.hidden_dim, 1.0);
        for r in 0..x.rows() {
            rms_normalize(x.row_mut(r));
        }
        x
    }

    /// Per-layer Q/K/V of a direct-stream sample.
    pub fn direct_layers(&self, sample: &Sample) -> Vec<LayerInputs> {
        let g = self.spec.geometry;
        let n = sample.seq_len;
        let mut rng = self.sample_rng(sample);
        let rho = self.spec.head_correlation;
        (0..g.num_layers)
            .map(|layer| {
                let scale = self.spec.layer_logit_scale(layer);
                let mut q = Vec::with_capacity(g.num_heads);
                for _ in 0..g.num_kv_heads() {
                    let shared = normal_matrix(&mut rng, n, g.head_dim, 1.0);
                    for _ in 0..g.gqa_group_size {
                        let own = normal_matrix(&mut rng, n, g.head_dim, 1.0);
                        let mut m = blend(&shared, &own, rho);
                        m.scale(scale);
                        q.push(m);
                    }
                }
                let k = (0..g.num_kv_heads()).map(|_| normal_matrix(&mut rng, n, g.head_dim, 1.0)).collect();
                let v = (0..g.num_kv_heads()).map(|_| normal_matrix(&mut rng, n, g.head_dim, 1.0)).collect();
                LayerInputs { q, k, v }
            })
            .collect()
    }

    /// Full-sequence forward pass, handing every layer to `attention`.
    pub fn prefill(&self, sample: &Sample, attention: &mut dyn LayerAttention) -> Result<()> {
        let g = self.spec.geometry;
        match &self.model {
            None => {
                for (layer, inputs) in self.direct_layers(sample).iter().enumerate() {
                    check_outputs(&attention.attend_layer(layer, inputs, &g)?, g.num_heads, sample.seq_len)?;
                }
            }
            Some(model) => {
                let mut x = self.embeddings(sample);
                for layer in 0..g.num_layers {
                    let inputs = LayerInputs {
                        q: model.w_q[layer].iter().map(|w| x.matmul(w)).collect::<Result<_>>()?,
                        k: model.w_k[layer].iter().map(|w| x.matmul(w)).collect::<Result<_>>()?,
                        v: model.w_v[layer].iter().map(|w| x.matmul(w)).collect::<Result<_>>()?,
                    };
                    let outputs = attention.attend_layer(layer, &inputs, &g)?;
                    check_outputs(&outputs, g.num_heads, sample.seq_len)?;
                    for r in 0..x.rows() {
                        let row = x.row_mut(r);
                        for (h, out) in outputs.iter().enumerate() {
                            for (dst, src) in row[h * g.head_dim..(h + 1) * g.head_dim].iter_mut().zip(out.row(r)) {
                                *dst += src;
                            }
                        }
                        rms_normalize(row);
                    }
                }
            }
        }
        Ok(())
    }

    /// Token-by-token forward pass through a fresh KV cache.
    pub fn decode(&self, sample: &Sample, attention: &mut dyn TokenAttention) -> Result<()> {
        let g = self.spec.geometry;
        let mut cache = KvCache::new(g);
        match &self.model {
            None => {
                let layers = self.direct_layers(sample);
                for t in 0..sample.seq_len {
                    for (layer, inputs) in layers.iter().enumerate() {
                        for kv in 0..g.num_kv_heads() {
                            cache.kv_head_mut(layer, kv).append(inputs.k[kv].row(t), inputs.v[kv].row(t))?;
                        }
                        let queries: Vec<Vec<f64>> = inputs.q.iter().map(|q| q.row(t).to_vec()).collect();
                        let out = attention.attend_token(layer, &cache, &queries)?;
                        check_token_outputs(&out, g.num_heads)?;
                    }
                }
            }
            Some(model) => {
                let x_all = self.embeddings(sample);
                for t in 0..sample.seq_len {
                    let mut x = x_all.row(t).to_vec();
                    for layer in 0..g.num_layers {
                        for kv in 0..g.num_kv_heads() {
                            let k = project(&x, &model.w_k[layer][kv]);
                            let v = project(&x, &model.w_v[layer][kv]);
                            cache.kv_head_mut(layer, kv).append(&k, &v)?;
                        }
                        let queries: Vec<Vec<f64>> = model.w_q[layer].iter().map(|w| project(&x, w)).collect();
                        let out = attention.attend_token(layer, &cache, &queries)?;
                        check_token_outputs(&out, g.num_heads)?;
                        for (h, o) in out.iter().enumerate() {
                            for (dst, src) in x[h * g.head_dim..(h + 1) * g.head_dim].iter_mut().zip(o) {
                                *dst += src;
                            }
                        }
                        rms_normalize(&mut x);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_outputs(outputs: &[Matrix], heads: usize, n: usize) -> Result<()> {
    if outputs.len() != heads || outputs.iter().any(|o| o.rows() != n) {
        return Err(Error::DimensionMismatch(format!(
            "layer attention returned {} outputs, expected {heads} of {n} rows",
            outputs.len()
        )));
    }
    Ok(())
}

fn check_token_outputs(outputs: &[Vec<f64>], heads: usize) -> Result<()> {
    if outputs.len() != heads {
        return Err(Error::DimensionMismatch(format!(
            "token attention returned {} outputs, expected {heads}",
            outputs.len()
        )));
    }
    Ok(())
}

/// `x · W` for a single row.
fn project(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (p, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(p)) {
            *o += xv * wv;
        }
    }
    out
}

fn rms_normalize(row: &mut [f64]) {
    let norm = l2_norm(row);
    if norm > 0.0 {
        let f = (row.len() as f64).sqrt() / norm;
        row.iter_mut().for_each(|x| *x *= f);
    }
}

/// Dense attention for every head; the reference forward pass.
#[derive(Debug, Default)]
pub struct DenseLayerAttention {
    pub opts: AttentionOptions,
}

impl LayerAttention for DenseLayerAttention {
    fn attend_layer(&mut self, _layer: usize, inputs: &LayerInputs, g: &ModelGeometry) -> Result<Vec<Matrix>> {
        (0..g.num_heads)
            .map(|h| {
                let kv = g.kv_head_of(h);
                crate::attention::prefill_attention_with(&inputs.q[h], &inputs.k[kv], &inputs.v[kv], self.opts)
                    .map(|out| out.p)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_scores;
    use crate::tensor::{entropy, row_softmax};

    fn small_spec(kind: WorkloadKind) -> WorkloadSpec {
        WorkloadSpec {
            kind,
            geometry: ModelGeometry::new(4, 4, 8, 2).unwrap(),
            num_samples: 100,
            seq_len: SeqLenRange { min: 24, max: 48 },
            calibration_fraction: 0.1,
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = generate(&small_spec(WorkloadKind::DirectStream), 3).unwrap();
        assert_eq!(s.calibration.len(), 10);
        assert_eq!(s.evaluation.len(), 90);
        for c in &s.calibration {
            assert!(!s.evaluation.iter().any(|e| e.index == c.index));
        }
    }

    #[test]
    fn bad_fraction_is_rejected() {
        for frac in [0.0, 1.0, -0.2, 1.5] {
            let spec = WorkloadSpec { calibration_fraction: frac, ..small_spec(WorkloadKind::ToyModel) };
            assert!(matches!(generate(&spec, 1), Err(Error::InvalidWorkload(_))));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [WorkloadKind::ToyModel, WorkloadKind::DirectStream] {
            let a = Workload::with_seed(small_spec(kind), 99).unwrap();
            let b = Workload::with_seed(small_spec(kind), 99).unwrap();
            assert_eq!(a.streams().unwrap(), b.streams().unwrap());
            assert_eq!(a.model(), b.model());
            let sample = a.streams().unwrap().calibration[0];
            match kind {
                WorkloadKind::ToyModel => {
                    let (x, y) = (a.embeddings(&sample), b.embeddings(&sample));
                    let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    assert_eq!(bits(&x), bits(&y));
                }
                WorkloadKind::DirectStream => {
                    let (x, y) = (a.direct_layers(&sample), b.direct_layers(&sample));
                    for (lx, ly) in x.iter().zip(&y) {
                        assert_eq!(lx.q, ly.q);
                        assert_eq!(lx.k, ly.k);
                        assert_eq!(lx.v, ly.v);
                    }
                }
            }
        }
        let other = Workload::with_seed(small_spec(WorkloadKind::ToyModel), 100).unwrap();
        let base = Workload::with_seed(small_spec(WorkloadKind::ToyModel), 99).unwrap();
        assert_ne!(base.model(), other.model());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = small_spec(WorkloadKind::DirectStream);
        assert_eq!(WorkloadSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert!(WorkloadSpec::from_toml("kind = \"toy-model\"").is_err());
    }

    struct EntropyProbe {
        per_layer: Vec<(f64, usize)>,
    }

    impl LayerAttention for EntropyProbe {
        fn attend_layer(&mut self, layer: usize, inputs: &LayerInputs, g: &ModelGeometry) -> Result<Vec<Matrix>> {
            let mut dense = DenseLayerAttention::default();
            for h in 0..g.num_heads {
                let a = attention_scores(&inputs.q[h], &inputs.k[g.kv_head_of(h)], AttentionOptions::standard())?;
                for r in 0..a.rows() {
                    let e = entropy(&row_softmax(&a.row(r)[..=r])?);
                    self.per_layer[layer].0 += e;
                    self.per_layer[layer].1 += 1;
                }
            }
            dense.attend_layer(layer, inputs, g)
        }
    }

    #[test]
    fn entropy_decreases_with_depth() {
        for kind in [WorkloadKind::ToyModel, WorkloadKind::DirectStream] {
            let spec = WorkloadSpec { entropy_skew: 2.0, ..small_spec(kind) };
            let w = Workload::new(spec).unwrap();
            let mut probe = EntropyProbe { per_layer: vec![(0.0, 0); 4] };
            for s in w.streams().unwrap().calibration {
                w.prefill(&s, &mut probe).unwrap();
            }
            let means: Vec<f64> = probe.per_layer.iter().map(|(s, n)| s / *n as f64).collect();
            assert!(means.windows(2).all(|p| p[1] < p[0]), "{kind:?}: {means:?}");
        }
    }

    #[test]
    fn direct_logits_look_normal() {
        let spec = WorkloadSpec { entropy_skew: 0.0, ..small_spec(WorkloadKind::DirectStream) };
        let w = Workload::new(spec).unwrap();
        let mut logits = Vec::new();
        for s in w.streams().unwrap().calibration.iter().take(4) {
            for layer in w.direct_layers(s) {
                let a = attention_scores(&layer.q[0], &layer.k[0], AttentionOptions::standard()).unwrap();
                for r in 0..a.rows() {
                    logits.extend_from_slice(&a.row(r)[..=r]);
                }
            }
        }
        let n = logits.len() as f64;
        let mean = logits.iter().sum::<f64>() / n;
        let var = logits.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let skew = logits.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n / var.powf(1.5);
        assert!(skew.abs() < 0.5, "skewness {skew}");
    }

    struct DenseTokens;

    impl TokenAttention for DenseTokens {
        fn attend_token(&mut self, layer: usize, cache: &KvCache, queries: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
            queries
                .iter()
                .enumerate()
                .map(|(h, q)| {
                    crate::attention::attend(cache.for_query_head(layer, h), q, AttentionOptions::standard()).map(|o| o.p)
                })
                .collect()
        }
    }

    struct Capture(Vec<Vec<Matrix>>);

    impl LayerAttention for Capture {
        fn attend_layer(&mut self, layer: usize, inputs: &LayerInputs, g: &ModelGeometry) -> Result<Vec<Matrix>> {
            let out = DenseLayerAttention::default().attend_layer(layer, inputs, g)?;
            self.0.push(out.clone());
            Ok(out)
        }
    }

    struct CaptureTokens(Vec<Vec<Vec<f64>>>);

    impl TokenAttention for CaptureTokens {
        fn attend_token(&mut self, layer: usize, cache: &KvCache, queries: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
            let out = DenseTokens.attend_token(layer, cache, queries)?;
            self.0.push(out.clone());
            Ok(out)
        }
    }

    #[test]
    fn toy_decode_matches_prefill() {
        let spec = small_spec(WorkloadKind::ToyModel);
        let w = Workload::new(spec).unwrap();
        let sample = Sample { index: 5, seq_len: 12 };
        let mut pre = Capture(Vec::new());
        w.prefill(&sample, &mut pre).unwrap();
        let mut dec = CaptureTokens(Vec::new());
        w.decode(&sample, &mut dec).unwrap();
        let layers = w.geometry().num_layers;
        for (step, heads) in dec.0.iter().enumerate() {
            let (t, layer) = (step / layers, step % layers);
            for (h, row) in heads.iter().enumerate() {
                for (got, want) in row.iter().zip(pre.0[layer][h].row(t)) {
                    assert!((got - want).abs() < 1e-10);
                }
            }
        }
    }
}
