//! Single-k threshold calibration.
//!
//! For every (layer, head, row id `r >= k`) the calibration pass records the
//! largest value *not* in the row's top-k (ascending order statistic
//! `len - k - 1`), then truncates the row to its top-k before the layer
//! output is formed, so deeper layers see sparsified activations. The stored
//! threshold is `mean + alpha * std` over the recorded values.
//!
//! Row id `r` is the sequence position; the row attends to `r + 1` tokens.

mod fit;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use fit::{fit_threshold_curve, BasisFn, CurveBasis, FittedThresholdCurve, HeadCurve};

use crate::attention::{attention_scores, AttentionOptions, ModelGeometry};
use crate::error::{Error, Result};
use crate::sparse::{lookup_threshold, select_by_threshold};
use crate::tensor::{mean_std, order_statistic, row_max, row_softmax, topk_split, Matrix};
use crate::workload::{LayerAttention, LayerInputs, Sample, Workload};

/// Which attention values thresholds are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Scaled scores `a` before softmax.
    PreSoftmax,
    /// Probabilities `s` after softmax.
    PostSoftmax,
}

impl std::fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PreSoftmax => "pre",
            Self::PostSoftmax => "post",
        })
    }
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" | "pre-softmax" => Ok(Self::PreSoftmax),
            "post" | "post-softmax" => Ok(Self::PostSoftmax),
            other => Err(Error::InvalidConfig(format!("unknown threshold mode `{other}`"))),
        }
    }
}

/// Target k per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KPolicy(pub Vec<usize>);

impl KPolicy {
    pub fn uniform(k: usize, num_layers: usize) -> Self {
        Self(vec![k; num_layers])
    }

    /// The first `dense_layers` layers keep `dense_k` elements, the rest keep `k`.
    pub fn dense_first(k: usize, dense_layers: usize, dense_k: usize, num_layers: usize) -> Self {
        Self((0..num_layers).map(|l| if l < dense_layers { dense_k } else { k }).collect())
    }

    pub fn k_for_layer(&self, layer: usize) -> usize {
        self.0[layer]
    }

    pub fn max_k(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub(crate) fn check(&self, geometry: &ModelGeometry) -> Result<()> {
        if self.0.len() != geometry.num_layers {
            return Err(Error::Calibration(format!(
                "k policy covers {} layers but the model has {}",
                self.0.len(),
                geometry.num_layers
            )));
        }
        if self.0.contains(&0) {
            return Err(Error::Calibration("k must be at least 1 in every layer".into()));
        }
        Ok(())
    }
}

/// Observed per-sample thresholds, keyed by (layer, head) then row id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThresholdObservations {
    num_heads: usize,
    heads: Vec<BTreeMap<u32, Vec<f64>>>,
}

impl ThresholdObservations {
    pub fn new(geometry: &ModelGeometry) -> Self {
        Self {
            num_heads: geometry.num_heads,
            heads: vec![BTreeMap::new(); geometry.num_layers * geometry.num_heads],
        }
    }

    pub fn record(&mut self, layer: usize, head: usize, row_id: usize, value: f64) {
        self.heads[layer * self.num_heads + head].entry(row_id as u32).or_default().push(value);
    }

    pub fn head(&self, layer: usize, head: usize) -> &BTreeMap<u32, Vec<f64>> {
        &self.heads[layer * self.num_heads + head]
    }

    pub fn sample_count(&self, layer: usize, head: usize, row_id: usize) -> usize {
        self.head(layer, head).get(&(row_id as u32)).map_or(0, Vec::len)
    }

    fn iter_heads(&self) -> impl Iterator<Item = (usize, usize, &BTreeMap<u32, Vec<f64>>)> {
        let nh = self.num_heads;
        self.heads.iter().enumerate().map(move |(i, m)| (i / nh, i % nh, m))
    }
}

/// Calibrated thresholds of one (layer, head), sorted by row id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadThresholds {
    pub row_ids: Vec<u32>,
    pub thetas: Vec<f64>,
    /// Offline SDC estimate per row, in units of `exp(a - max a)`.
    pub e_tilde: Option<Vec<f64>>,
}

impl HeadThresholds {
    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    /// Position of `row_id`, or of the nearest calibrated row (smaller wins ties).
    pub fn nearest(&self, row_id: usize) -> Option<usize> {
        if self.row_ids.is_empty() {
            return None;
        }
        let key = row_id.min(u32::MAX as usize) as u32;
        match self.row_ids.binary_search(&key) {
            Ok(i) => Some(i),
            Err(0) => Some(0),
            Err(i) if i == self.row_ids.len() => Some(i - 1),
            Err(i) => {
                let below = key - self.row_ids[i - 1];
                let above = self.row_ids[i] - key;
                Some(if above < below { i } else { i - 1 })
            }
        }
    }
}

/// Deployable thresholds for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub mode: ThresholdMode,
    pub geometry: ModelGeometry,
    pub alpha: f64,
    pub k_policy: KPolicy,
    pub heads: Vec<HeadThresholds>,
    /// When present, lookups evaluate the fitted curve instead of the table.
    pub curve: Option<FittedThresholdCurve>,
}

impl ThresholdTable {
    pub fn empty(mode: ThresholdMode, geometry: ModelGeometry, alpha: f64, k_policy: KPolicy) -> Self {
        Self {
            mode,
            geometry,
            alpha,
            k_policy,
            heads: vec![HeadThresholds::default(); geometry.num_layers * geometry.num_heads],
            curve: None,
        }
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadThresholds {
        &self.heads[layer * self.geometry.num_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadThresholds {
        &mut self.heads[layer * self.geometry.num_heads + head]
    }

    pub fn k_for_layer(&self, layer: usize) -> usize {
        self.k_policy.k_for_layer(layer)
    }

    pub fn total_thresholds(&self) -> usize {
        self.heads.iter().map(HeadThresholds::len).sum()
    }

    pub fn has_e_tilde(&self) -> bool {
        self.heads.iter().any(|h| h.e_tilde.is_some())
    }

    /// Threshold of exactly `row_id`, if calibrated.
    pub fn theta_at(&self, layer: usize, head: usize, row_id: usize) -> Option<f64> {
        let h = self.head(layer, head);
        h.row_ids.binary_search(&(row_id as u32)).ok().map(|i| h.thetas[i])
    }

    /// Per-(layer, head) threshold summary: (min, mean, max) over rows.
    pub fn layer_summary(&self, layer: usize) -> Option<(f64, f64, f64)> {
        let values: Vec<f64> = (0..self.geometry.num_heads)
            .flat_map(|h| self.head(layer, h).thetas.iter().copied())
            .collect();
        let (mean, _) = mean_std(&values)?;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((min, mean, max))
    }
}

/// A calibrated table plus the raw observations it was aggregated from.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub table: ThresholdTable,
    pub observations: ThresholdObservations,
}

/// Run the single-k calibration over `samples`.
pub fn calibrate_single_k(
    workload: &Workload,
    samples: &[Sample],
    k_policy: &KPolicy,
    alpha: f64,
    mode: ThresholdMode,
) -> Result<Calibration> {
    let geometry = *workload.geometry();
    check_stream(samples, k_policy, &geometry)?;
    if !alpha.is_finite() {
        return Err(Error::Calibration(format!("alpha must be finite, got {alpha}")));
    }
    let mut pass = CalibrationPass {
        mode,
        k_policy,
        opts: workload.attention_options(),
        observations: ThresholdObservations::new(&geometry),
    };
    for sample in samples {
        workload.prefill(sample, &mut pass)?;
    }
    let observations = pass.observations;
    let mut table = ThresholdTable::empty(mode, geometry, alpha, k_policy.clone());
    aggregate_into(&mut table, &observations, alpha)?;
    Ok(Calibration { table, observations })
}

fn check_stream(samples: &[Sample], k_policy: &KPolicy, geometry: &ModelGeometry) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Calibration("calibration stream is empty".into()));
    }
    k_policy.check(geometry)?;
    let max_k = k_policy.max_k();
    if let Some(short) = samples.iter().find(|s| s.seq_len <= max_k) {
        return Err(Error::Calibration(format!(
            "sample {} has length {} but the largest k is {max_k}",
            short.index, short.seq_len
        )));
    }
    Ok(())
}

/// `theta_r = mean(obs_r) + alpha * std(obs_r)` for every observed row.
fn aggregate_into(table: &mut ThresholdTable, observations: &ThresholdObservations, alpha: f64) -> Result<()> {
    for (layer, head, rows) in observations.iter_heads() {
        let slot = table.head_mut(layer, head);
        slot.row_ids.clear();
        slot.thetas.clear();
        for (&row_id, values) in rows {
            let (mean, std) = mean_std(values).expect("observed rows are non-empty");
            let theta = mean + alpha * std;
            if !theta.is_finite() {
                return Err(Error::Calibration(format!(
                    "non-finite threshold at layer {layer}, head {head}, row {row_id}"
                )));
            }
            slot.row_ids.push(row_id);
            slot.thetas.push(theta);
        }
    }
    Ok(())
}

/// Recompute thresholds from stored observations with a different offset.
pub fn reaggregate(calibration: &Calibration, alpha: f64) -> Result<ThresholdTable> {
    let mut table = calibration.table.clone();
    table.alpha = alpha;
    aggregate_into(&mut table, &calibration.observations, alpha)?;
    Ok(table)
}

/// The per-sample threshold of one row: the largest value outside its top-k.
pub fn row_threshold(row: &[f64], k: usize) -> Result<f64> {
    if k >= row.len() {
        return Err(Error::KOutOfRange { k, len: row.len() });
    }
    order_statistic(row, row.len() - k - 1)
}

struct CalibrationPass<'a> {
    mode: ThresholdMode,
    k_policy: &'a KPolicy,
    opts: AttentionOptions,
    observations: ThresholdObservations,
}

impl LayerAttention for CalibrationPass<'_> {
    fn attend_layer(&mut self, layer: usize, inputs: &LayerInputs, g: &ModelGeometry) -> Result<Vec<Matrix>> {
        let k = self.k_policy.k_for_layer(layer);
        let mut outputs = Vec::with_capacity(g.num_heads);
        for h in 0..g.num_heads {
            let kv = g.kv_head_of(h);
            let a = attention_scores(&inputs.q[h], &inputs.k[kv], self.opts)?;
            let n = a.rows();
            let mut s = Matrix::zeros(n, n);
            for r in 0..n {
                let scores = &a.row(r)[..=r];
                let probs = &mut s.row_mut(r)[..=r];
                match self.mode {
                    ThresholdMode::PreSoftmax => {
                        if r >= k {
                            let (keep, theta) = topk_split(scores, k)?;
                            self.observations.record(layer, h, r, theta);
                            let kept: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
                            for (&i, p) in keep.iter().zip(row_softmax(&kept)?) {
                                probs[i] = p;
                            }
                        } else {
                            probs.copy_from_slice(&row_softmax(scores)?);
                        }
                    }
                    ThresholdMode::PostSoftmax => {
                        let full = row_softmax(scores)?;
                        if r >= k {
                            let (keep, theta) = topk_split(&full, k)?;
                            self.observations.record(layer, h, r, theta);
                            for &i in &keep {
                                probs[i] = full[i];
                            }
                        } else {
                            probs.copy_from_slice(&full);
                        }
                    }
                }
            }
            outputs.push(s.matmul(&inputs.v[kv])?);
        }
        Ok(outputs)
    }
}

/// Copy of `row` with every position outside `keep` (sorted) replaced by `fill`.
fn masked_copy(row: &[f64], keep: &[usize], fill: f64) -> Vec<f64> {
    let mut out = vec![fill; row.len()];
    for &i in keep {
        out[i] = row[i];
    }
    out
}

/// Attach offline SDC estimates to a pre-softmax table.
///
/// Each calibration row is thresholded with its table threshold; the exact
/// discarded mass `E = sum_{j not kept} exp(a_j - max a)` is recorded and
/// aggregated as `mean + e_alpha * std` per (layer, head, row). The forward
/// pass keeps only the selected elements so deeper layers see sparsified
/// activations. Rows of the table that the stream never reaches take the
/// estimate of the nearest observed row.
pub fn calibrate_sdc_offline(
    workload: &Workload,
    samples: &[Sample],
    table: &ThresholdTable,
    e_alpha: f64,
) -> Result<ThresholdTable> {
    if table.mode != ThresholdMode::PreSoftmax {
        return Err(Error::Calibration(
            "offline softmax-denominator compensation needs a pre-softmax table".into(),
        ));
    }
    check_stream(samples, &table.k_policy, &table.geometry)?;
    let mut pass = SdcPass {
        table,
        opts: workload.attention_options(),
        observations: ThresholdObservations::new(&table.geometry),
    };
    for sample in samples {
        workload.prefill(sample, &mut pass)?;
    }
    let mut out = table.clone();
    for layer in 0..table.geometry.num_layers {
        for head in 0..table.geometry.num_heads {
            let observed = pass.observations.head(layer, head);
            let slot = out.head_mut(layer, head);
            if slot.is_empty() {
                continue;
            }
            if observed.is_empty() {
                return Err(Error::Calibration(format!(
                    "no compensation samples for layer {layer}, head {head}"
                )));
            }
            let aggregated: Vec<(u32, f64)> = observed
                .iter()
                .map(|(&r, values)| {
                    let (mean, std) = mean_std(values).expect("non-empty");
                    (r, mean + e_alpha * std)
                })
                .collect();
            let e_tilde = slot
                .row_ids
                .iter()
                .map(|&r| nearest_value(&aggregated, r))
                .collect();
            slot.e_tilde = Some(e_tilde);
        }
    }
    Ok(out)
}

fn nearest_value(sorted: &[(u32, f64)], key: u32) -> f64 {
    match sorted.binary_search_by_key(&key, |&(r, _)| r) {
        Ok(i) => sorted[i].1,
        Err(0) => sorted[0].1,
        Err(i) if i == sorted.len() => sorted[i - 1].1,
        Err(i) => {
            if sorted[i].0 - key < key - sorted[i - 1].0 {
                sorted[i].1
            } else {
                sorted[i - 1].1
            }
        }
    }
}

/// Exact discarded exponent mass of a row, stabilized by the row maximum.
pub fn discarded_mass(row: &[f64], kept: &[usize]) -> f64 {
    let max = row_max(row);
    let mut is_kept = vec![false; row.len()];
    for &i in kept {
        is_kept[i] = true;
    }
    row.iter()
        .zip(&is_kept)
        .filter(|(_, &k)| !k)
        .map(|(&a, _)| (a - max).exp())
        .sum()
}

struct SdcPass<'a> {
    table: &'a ThresholdTable,
    opts: AttentionOptions,
    observations: ThresholdObservations,
}

impl LayerAttention for SdcPass<'_> {
    fn attend_layer(&mut self, layer: usize, inputs: &LayerInputs, g: &ModelGeometry) -> Result<Vec<Matrix>> {
        let k = self.table.k_for_layer(layer);
        let mut outputs = Vec::with_capacity(g.num_heads);
        for h in 0..g.num_heads {
            let kv = g.kv_head_of(h);
            let a = attention_scores(&inputs.q[h], &inputs.k[kv], self.opts)?;
            let n = a.rows();
            let mut s = Matrix::zeros(n, n);
            for r in 0..n {
                let scores = &a.row(r)[..=r];
                let probs = &mut s.row_mut(r)[..=r];
                if r < k {
                    probs.copy_from_slice(&row_softmax(scores)?);
                    continue;
                }
                let theta = lookup_threshold(self.table, layer, h, r)?;
                let sel = select_by_threshold(scores, theta);
                self.observations.record(layer, h, r, discarded_mass(scores, &sel.kept));
                probs.copy_from_slice(&row_softmax(&masked_copy(scores, &sel.kept, f64::NEG_INFINITY))?);
            }
            outputs.push(s.matmul(&inputs.v[kv])?);
        }
        Ok(outputs)
    }
}
