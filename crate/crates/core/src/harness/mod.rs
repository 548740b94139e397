//! Evaluation runs: sparse attention against the dense reference over an
//! evaluation stream, reduced to per-layer statistics.

mod report;

pub use report::{merge_reports, read_report, write_report, ReportRow, RunReport, CSV_COLUMNS, SCHEMA_VERSION};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_scores, AttentionOptions, KvCache, ModelGeometry, PrefixRows, ValueRows};
use crate::calibration::{KPolicy, ThresholdMode, ThresholdTable};
use crate::error::{Error, Result};
use crate::sparse::{
    jaccard, sparse_attend_group, threshold_rule, CompensationConfig, HeadRef, RowRule, SelectionTrace,
};
use crate::tensor::{dot, l2_norm, row_softmax, topk_indices, Matrix};
use crate::workload::{LayerAttention, LayerInputs, Sample, TokenAttention, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dense,
    TopK,
    TopTheta,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::TopK => "topk",
            Self::TopTheta => "top-theta",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Prefill,
    Decode,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Prefill => "prefill",
            Self::Decode => "decode",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(Self::Prefill),
            "decode" => Ok(Self::Decode),
            other => Err(Error::InvalidConfig(format!("unknown phase {other:?}"))),
        }
    }
}

/// One evaluated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub name: String,
    pub method: Method,
    pub mode: ThresholdMode,
    /// Ignored for top-θ, which uses the table's policy.
    pub k_policy: KPolicy,
    pub compensation: CompensationConfig,
    pub phase: Phase,
}

/// Per-layer running sums; merged across samples.
#[derive(Debug, Clone, Default)]
pub struct LayerAccum {
    kept: u64,
    visible: u64,
    union: u64,
    group_visible: u64,
    ratio_sum: f64,
    ratio_sq: f64,
    ratio_rows: u64,
    jaccard_sum: f64,
    jaccard_rows: u64,
    cosine_sum: f64,
    rel_l2: Vec<f64>,
}

impl LayerAccum {
    fn merge(&mut self, other: &Self) {
        self.kept += other.kept;
        self.visible += other.visible;
        self.union += other.union;
        self.group_visible += other.group_visible;
        self.ratio_sum += other.ratio_sum;
        self.ratio_sq += other.ratio_sq;
        self.ratio_rows += other.ratio_rows;
        self.jaccard_sum += other.jaccard_sum;
        self.jaccard_rows += other.jaccard_rows;
        self.cosine_sum += other.cosine_sum;
        self.rel_l2.extend_from_slice(&other.rel_l2);
    }

    fn stats(&self) -> LayerStats {
        let mean = |s: f64, n: u64| if n == 0 { f64::NAN } else { s / n as f64 };
        let ratio_mean = mean(self.ratio_sum, self.ratio_rows);
        let ratio_std = if self.ratio_rows == 0 {
            f64::NAN
        } else {
            (mean(self.ratio_sq, self.ratio_rows) - ratio_mean * ratio_mean).max(0.0).sqrt()
        };
        let mut sorted = self.rel_l2.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        let median = match sorted.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => sorted[n / 2],
            n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        LayerStats {
            kept_ratio: mean(self.kept as f64, self.visible),
            vrow_ratio: mean(self.union as f64, self.group_visible),
            k_tilde_over_k_mean: ratio_mean,
            k_tilde_over_k_std: ratio_std,
            jaccard_topk_mean: mean(self.jaccard_sum, self.jaccard_rows),
            rel_l2_mean: mean(sorted.iter().sum(), sorted.len() as u64),
            rel_l2_median: median,
            cosine_mean: mean(self.cosine_sum, sorted.len() as u64),
            rows: sorted.len() as u64,
        }
    }
}

/// Reduced statistics of one layer (or of all layers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStats {
    /// Kept elements over visible elements, summed over every head-row.
    pub kept_ratio: f64,
    /// Group-union V rows over visible rows, summed over every group-row.
    pub vrow_ratio: f64,
    /// Over sparsified rows only; NaN when no row was sparsified.
    pub k_tilde_over_k_mean: f64,
    pub k_tilde_over_k_std: f64,
    /// Top-θ kept set versus exact top-k on sparsified rows.
    pub jaccard_topk_mean: f64,
    pub rel_l2_mean: f64,
    pub rel_l2_median: f64,
    pub cosine_mean: f64,
    /// Head-rows evaluated.
    pub rows: u64,
}

/// Result of [`evaluate`]: per-layer stats plus the summary over all layers.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub layers: Vec<LayerStats>,
    pub summary: LayerStats,
    pub traces: Vec<SelectionTrace>,
}

/// Run `config` over `samples`, one worker per sample, and reduce.
pub fn evaluate(
    workload: &Workload,
    samples: &[Sample],
    config: &RunConfig,
    table: Option<&ThresholdTable>,
    collect_traces: bool,
) -> Result<Evaluation> {
    let g = *workload.geometry();
    let k_policy = match (config.method, table) {
        (Method::TopTheta, None) => return Err(Error::InvalidConfig("top-theta needs a threshold table".into())),
        (Method::TopTheta, Some(t)) => {
            if t.mode != config.mode {
                return Err(Error::InvalidConfig(format!(
                    "threshold store was calibrated {}-softmax but the run asks for {}-softmax",
                    t.mode, config.mode
                )));
            }
            if t.geometry != g {
                return Err(Error::InvalidConfig("threshold store geometry does not match the workload".into()));
            }
            t.k_policy.clone()
        }
        _ => config.k_policy.clone(),
    };
    k_policy.check(&g)?;
    if config.method != Method::Dense {
        config.compensation.validate(config.mode)?;
    }
    if samples.is_empty() {
        return Err(Error::InvalidConfig("evaluation stream is empty".into()));
    }

    let per_sample: Vec<Result<(Vec<LayerAccum>, Vec<SelectionTrace>)>> = samples
        .par_iter()
        .map(|sample| {
            let mut ev = Evaluator {
                config,
                table,
                k_policy: &k_policy,
                opts: workload.attention_options(),
                layers: vec![LayerAccum::default(); g.num_layers],
                traces: collect_traces.then(Vec::new),
            };
            match config.phase {
                Phase::Prefill => workload.prefill(sample, &mut ev)?,
                Phase::Decode => workload.decode(sample, &mut ev)?,
            }
            Ok((ev.layers, ev.traces.unwrap_or_default()))
        })
        .collect();

    let mut layers = vec![LayerAccum::default(); g.num_layers];
    let mut traces = Vec::new();
    for result in per_sample {
        let (acc, t) = result?;
        for (dst, src) in layers.iter_mut().zip(&acc) {
            dst.merge(src);
        }
        traces.extend(t);
    }
    let mut all = LayerAccum::default();
    for l in &layers {
        all.merge(l);
    }
    Ok(Evaluation { layers: layers.iter().map(LayerAccum::stats).collect(), summary: all.stats(), traces })
}

struct Evaluator<'a> {
    config: &'a RunConfig,
    table: Option<&'a ThresholdTable>,
    k_policy: &'a KPolicy,
    opts: AttentionOptions,
    layers: Vec<LayerAccum>,
    traces: Option<Vec<SelectionTrace>>,
}

impl Evaluator<'_> {
    /// Sparse outputs of every head in a group for one row, with statistics.
    fn group_row<V: ValueRows + ?Sized>(
        &mut self,
        layer: usize,
        heads: std::ops::Range<usize>,
        row_id: usize,
        scores: &[Vec<f64>],
        values: &V,
        mu: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let k = self.k_policy.k_for_layer(layer);
        let sparse_row = self.config.method != Method::Dense && row_id >= k;
        let mut rules = Vec::with_capacity(scores.len());
        let mut e_offline = Vec::with_capacity(scores.len());
        for head in heads.clone() {
            let (rule, e) = match self.config.method {
                Method::Dense => (RowRule::Dense, None),
                Method::TopK if sparse_row => (RowRule::TopK(k), None),
                Method::TopK => (RowRule::Dense, None),
                Method::TopTheta => {
                    let table = self.table.expect("checked in evaluate");
                    threshold_rule(table, HeadRef { layer, head }, row_id, &self.config.compensation)?
                }
            };
            rules.push(rule);
            e_offline.push(e);
        }
        let out = sparse_attend_group(
            scores,
            values,
            mu,
            self.config.mode,
            &rules,
            &self.config.compensation,
            &e_offline,
        )?;

        let acc = &mut self.layers[layer];
        let n = values.num_rows() as u64;
        acc.union += out.union.len() as u64;
        acc.group_visible += n;
        for ((head, s), (p_hat, sel)) in heads.zip(scores).zip(out.outputs.iter().zip(&out.selections)) {
            let probs = row_softmax(s)?;
            let mut p = vec![0.0; mu.len()];
            for (i, &w) in probs.iter().enumerate() {
                for (o, &v) in p.iter_mut().zip(values.value_row(i)) {
                    *o += w * v;
                }
            }
            acc.kept += sel.kept_count() as u64;
            acc.visible += n;
            if sparse_row {
                let ratio = sel.kept_count() as f64 / k as f64;
                acc.ratio_sum += ratio;
                acc.ratio_sq += ratio * ratio;
                acc.ratio_rows += 1;
                let exact = topk_indices(s, k)?;
                acc.jaccard_sum += jaccard(&sel.kept, &exact);
                acc.jaccard_rows += 1;
            }
            let diff: Vec<f64> = p_hat.iter().zip(&p).map(|(a, b)| a - b).collect();
            let (np, nh) = (l2_norm(&p), l2_norm(p_hat));
            acc.rel_l2.push(if np > 0.0 { l2_norm(&diff) / np } else { l2_norm(&diff) });
            acc.cosine_sum += if np > 0.0 && nh > 0.0 { dot(&p, p_hat) / (np * nh) } else { 1.0 };
            if let Some(traces) = &mut self.traces {
                traces.push(SelectionTrace {
                    layer,
                    head,
                    row_id,
                    k_tilde: sel.kept_count(),
                    union: out.union.len(),
                    beta: sel.beta.unwrap_or(0.0),
                    sdc_factor: sel.sdc_factor,
                });
            }
        }
        Ok(out.outputs)
    }
}

impl LayerAttention for Evaluator<'_> {
    fn attend_layer(&mut self, layer: usize, inputs: &LayerInputs, g: &ModelGeometry) -> Result<Vec<Matrix>> {
        let n = inputs.q[0].rows();
        let mut outputs = vec![Matrix::zeros(n, g.head_dim); g.num_heads];
        for kv in 0..g.num_kv_heads() {
            let heads = g.group_heads(kv);
            let v = &inputs.v[kv];
            let scores: Vec<Matrix> = heads
                .clone()
                .map(|h| attention_scores(&inputs.q[h], &inputs.k[kv], self.opts))
                .collect::<Result<_>>()?;
            let mut v_sum = vec![0.0; g.head_dim];
            let mut next = 0;
            for r in 0..n {
                let visible = if self.opts.causal { r + 1 } else { n };
                while next < visible {
                    for (s, &x) in v_sum.iter_mut().zip(v.row(next)) {
                        *s += x;
                    }
                    next += 1;
                }
                let mu: Vec<f64> = v_sum.iter().map(|s| s / visible as f64).collect();
                let rows: Vec<Vec<f64>> = scores.iter().map(|a| a.row(r)[..visible].to_vec()).collect();
                let out = self.group_row(layer, heads.clone(), r, &rows, &PrefixRows::new(v, visible), &mu)?;
                for (h, o) in heads.clone().zip(out) {
                    outputs[h].row_mut(r).copy_from_slice(&o);
                }
            }
        }
        Ok(outputs)
    }
}

impl TokenAttention for Evaluator<'_> {
    fn attend_token(&mut self, layer: usize, cache: &KvCache, queries: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let g = *cache.geometry();
        let mut outputs = vec![Vec::new(); g.num_heads];
        for kv in 0..g.num_kv_heads() {
            let heads = g.group_heads(kv);
            let head_cache = cache.kv_head(layer, kv);
            let scores: Vec<Vec<f64>> =
                heads.clone().map(|h| head_cache.scores(&queries[h], self.opts)).collect::<Result<_>>()?;
            let row_id = head_cache.len() - 1;
            let out = self.group_row(layer, heads.clone(), row_id, &scores, head_cache, head_cache.v_mean())?;
            for (h, o) in heads.zip(out) {
                outputs[h] = o;
            }
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::calibrate_single_k;
    use crate::sparse::SdcEstimator;
    use crate::workload::WorkloadSpec;

    fn small_workload() -> Workload {
        let spec = WorkloadSpec {
            geometry: ModelGeometry::new(2, 4, 8, 2).unwrap(),
            num_samples: 10,
            seq_len: crate::workload::SeqLenRange { min: 24, max: 40 },
            calibration_fraction: 0.5,
            ..WorkloadSpec::default()
        };
        Workload::new(spec).unwrap()
    }

    fn config(method: Method, mode: ThresholdMode, k: usize, phase: Phase) -> RunConfig {
        RunConfig {
            name: method.to_string(),
            method,
            mode,
            k_policy: KPolicy::uniform(k, 2),
            compensation: CompensationConfig::none(),
            phase,
        }
    }

    #[test]
    fn dense_run_is_exact() {
        let w = small_workload();
        let eval = w.streams().unwrap().evaluation;
        for phase in [Phase::Prefill, Phase::Decode] {
            let r = evaluate(&w, &eval, &config(Method::Dense, ThresholdMode::PreSoftmax, 4, phase), None, false).unwrap();
            assert_eq!(r.summary.kept_ratio, 1.0);
            assert_eq!(r.summary.vrow_ratio, 1.0);
            assert!(r.summary.rel_l2_mean < 1e-12);
            assert!((r.summary.cosine_mean - 1.0).abs() < 1e-12);
            assert!(r.summary.k_tilde_over_k_mean.is_nan());
        }
    }

    #[test]
    fn topk_keeps_exactly_k() {
        let w = small_workload();
        let eval = w.streams().unwrap().evaluation;
        let r = evaluate(&w, &eval, &config(Method::TopK, ThresholdMode::PreSoftmax, 6, Phase::Prefill), None, false)
            .unwrap();
        assert_eq!(r.summary.k_tilde_over_k_mean, 1.0);
        assert!(r.summary.k_tilde_over_k_std < 1e-12);
        assert_eq!(r.summary.jaccard_topk_mean, 1.0);
        assert!(r.summary.kept_ratio < 1.0);
        assert!(r.summary.rel_l2_mean > 0.0);
    }

    #[test]
    fn prefill_and_decode_agree_for_top_theta() {
        let w = small_workload();
        let streams = w.streams().unwrap();
        let cal = calibrate_single_k(&w, &streams.calibration, &KPolicy::uniform(6, 2), 0.0, ThresholdMode::PreSoftmax)
            .unwrap();
        let mut cfg = config(Method::TopTheta, ThresholdMode::PreSoftmax, 6, Phase::Prefill);
        cfg.compensation.sdc = SdcEstimator::Exact;
        let pre = evaluate(&w, &streams.evaluation, &cfg, Some(&cal.table), true).unwrap();
        cfg.phase = Phase::Decode;
        let dec = evaluate(&w, &streams.evaluation, &cfg, Some(&cal.table), true).unwrap();
        assert_eq!(pre.summary.kept_ratio, dec.summary.kept_ratio);
        assert_eq!(pre.traces.len(), dec.traces.len());
        assert!((pre.summary.rel_l2_mean - dec.summary.rel_l2_mean).abs() < 1e-9);
        for t in &pre.traces {
            assert!(t.union >= t.k_tilde);
        }
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let w = small_workload();
        let streams = w.streams().unwrap();
        let cal = calibrate_single_k(&w, &streams.calibration, &KPolicy::uniform(6, 2), 0.0, ThresholdMode::PreSoftmax)
            .unwrap();
        let cfg = config(Method::TopTheta, ThresholdMode::PostSoftmax, 6, Phase::Prefill);
        assert!(matches!(
            evaluate(&w, &streams.evaluation, &cfg, Some(&cal.table), false),
            Err(Error::InvalidConfig(_))
        ));
    }
}
