//! Top-θ and Top-k sparsified attention rows with softmax-denominator
//! compensation (SDC) and V-mean compensation (VMC).
//!
//! A row is processed in two phases. `prepare` decides the kept index set and
//! the weight of every kept element without touching V. `finish` then reads
//! exactly the kept V rows. For a GQA group the kept sets of all heads are
//! united first, so each shared V row is read once per group.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionOptions, KvHead, ValueRows};
use crate::calibration::{discarded_mass, ThresholdMode, ThresholdTable};
use crate::error::{Error, Result};
use crate::tensor::{argmax, order_statistic, row_max, row_softmax, topk_indices};

/// Default `gamma` of the exp-threshold estimator.
pub const DEFAULT_GAMMA: f64 = 0.05;

/// Kept set of one attention row and the statistics the compensations use.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSelection {
    /// Kept indices `I`, ascending.
    pub kept: Vec<usize>,
    /// Length of the row the selection was taken from.
    pub row_len: usize,
    pub mode: Option<ThresholdMode>,
    /// Threshold the row was compared against (for Top-k, the largest discarded value).
    pub theta: f64,
    /// Sum of `exp(a_i - max a)` over `I` (pre-softmax only).
    pub r_sum: Option<f64>,
    /// Estimated discarded exponent mass `Ẽ` in the same units as `r_sum`.
    pub e_estimate: Option<f64>,
    /// Residual probability mass not covered by the kept weights.
    pub beta: Option<f64>,
    /// Applied `R / (R + Ẽ)`, 1 when no SDC ran.
    pub sdc_factor: f64,
}

impl SparseSelection {
    fn new(kept: Vec<usize>, row_len: usize, theta: f64) -> Self {
        Self {
            kept,
            row_len,
            mode: None,
            theta,
            r_sum: None,
            e_estimate: None,
            beta: None,
            sdc_factor: 1.0,
        }
    }

    /// `k̃ = |I|`.
    #[inline]
    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }
}

/// Keep every value strictly above `theta`; an empty result keeps the argmax.
pub fn select_by_threshold(row: &[f64], theta: f64) -> SparseSelection {
    let mut kept: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v > theta).map(|(i, _)| i).collect();
    if kept.is_empty() {
        kept.extend(argmax(row));
    }
    SparseSelection::new(kept, row.len(), theta)
}

/// Exact top-k, recorded in the same shape as a threshold selection.
pub fn select_topk_baseline(row: &[f64], k: usize) -> Result<SparseSelection> {
    let kept = topk_indices(row, k)?;
    let theta = if k < row.len() {
        order_statistic(row, row.len() - k - 1)?
    } else {
        f64::NEG_INFINITY
    };
    Ok(SparseSelection::new(kept, row.len(), theta))
}

/// Cap a selection at `k` elements: highest values first, then positions
/// closest to either end of the row (first token before last on equal distance).
pub fn cap_selection(sel: &mut SparseSelection, row: &[f64], k: usize) {
    if sel.kept.len() <= k {
        return;
    }
    let n = row.len();
    let edge = |i: usize| i.min(n - 1 - i);
    sel.kept.sort_by(|&i, &j| {
        row[j]
            .total_cmp(&row[i])
            .then(edge(i).cmp(&edge(j)))
            .then(i.cmp(&j))
    });
    sel.kept.truncate(k);
    sel.kept.sort_unstable();
}

/// Union of the kept sets of heads sharing one V matrix, ascending.
pub fn gqa_vrow_union(selections: &[SparseSelection]) -> Vec<usize> {
    let len = selections.iter().map(|s| s.row_len).max().unwrap_or(0);
    let mut hit = vec![false; len];
    for s in selections {
        for &i in &s.kept {
            hit[i] = true;
        }
    }
    hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
}

/// Threshold for `row_id`: the fitted curve when attached, else the nearest
/// calibrated row (smaller row id on ties).
pub fn lookup_threshold(table: &ThresholdTable, layer: usize, head: usize, row_id: usize) -> Result<f64> {
    if let Some(curve) = &table.curve {
        return Ok(curve.eval(layer, head, row_id));
    }
    let h = table.head(layer, head);
    h.nearest(row_id)
        .map(|i| h.thetas[i])
        .ok_or(Error::NoCalibratedRows { layer, head })
}

/// Offline-calibrated `Ẽ` of the nearest calibrated row.
pub fn lookup_e_tilde(table: &ThresholdTable, layer: usize, head: usize, row_id: usize) -> Result<f64> {
    let h = table.head(layer, head);
    match (&h.e_tilde, h.nearest(row_id)) {
        (Some(e), Some(i)) => Ok(e[i]),
        _ => Err(Error::MissingCompensation { layer, head, row_id }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdcEstimator {
    None,
    /// Per-row constant from calibration.
    Offline,
    /// `gamma · (n - k̃) · exp(theta - max a)`.
    ExpThreshold,
    /// The true discarded mass.
    Exact,
}

impl std::str::FromStr for SdcEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "offline" => Ok(Self::Offline),
            "exp-threshold" => Ok(Self::ExpThreshold),
            "exact" => Ok(Self::Exact),
            other => Err(Error::InvalidConfig(format!("unknown SDC estimator `{other}`"))),
        }
    }
}

impl std::fmt::Display for SdcEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Offline => "offline",
            Self::ExpThreshold => "exp-threshold",
            Self::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationConfig {
    pub sdc: SdcEstimator,
    pub gamma: f64,
    pub vmc: bool,
    /// Cap thresholded selections at the layer's k.
    pub capk: bool,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self { sdc: SdcEstimator::None, gamma: DEFAULT_GAMMA, vmc: false, capk: false }
    }
}

impl CompensationConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, mode: ThresholdMode) -> Result<()> {
        if self.sdc != SdcEstimator::None && mode == ThresholdMode::PostSoftmax {
            return Err(Error::InvalidConfig(
                "softmax-denominator compensation only applies to pre-softmax thresholding".into(),
            ));
        }
        if self.vmc && mode == ThresholdMode::PreSoftmax && self.sdc == SdcEstimator::None {
            return Err(Error::InvalidConfig(
                "V-mean compensation on pre-softmax rows requires a softmax-denominator estimator".into(),
            ));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `R / (R + Ẽ)` for a pre-softmax selection, filling `r_sum` and `e_estimate`.
///
/// `row` is the full pre-softmax row; `e_offline` is consulted only by the
/// offline estimator.
pub fn sdc_factor(
    sel: &mut SparseSelection,
    row: &[f64],
    config: &CompensationConfig,
    e_offline: Option<f64>,
) -> Result<f64> {
    let max = row_max(row);
    let r_sum: f64 = sel.kept.iter().map(|&i| (row[i] - max).exp()).sum();
    let n = row.len();
    let e = match config.sdc {
        SdcEstimator::None => 0.0,
        SdcEstimator::Offline => e_offline.ok_or_else(|| {
            Error::InvalidConfig("offline SDC needs a calibrated compensation value".into())
        })?,
        SdcEstimator::ExpThreshold => {
            config.gamma * (n - sel.kept_count()) as f64 * (sel.theta - max).exp()
        }
        SdcEstimator::Exact => discarded_mass(row, &sel.kept),
    };
    sel.r_sum = Some(r_sum);
    sel.e_estimate = Some(e);
    let factor = r_sum / (r_sum + e);
    sel.sdc_factor = factor;
    Ok(factor)
}

/// `p̂ = p̃ + β·μ`.
pub fn vmc_compensate(p_tilde: &[f64], beta: f64, mu: &[f64]) -> Result<Vec<f64>> {
    if p_tilde.len() != mu.len() {
        return Err(Error::DimensionMismatch(format!(
            "output of length {} and V mean of length {}",
            p_tilde.len(),
            mu.len()
        )));
    }
    Ok(p_tilde.iter().zip(mu).map(|(p, m)| p + beta * m).collect())
}

/// How a row picks its kept set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowRule {
    /// Keep everything.
    Dense,
    /// Exact top-k.
    TopK(usize),
    /// Strictly above the threshold, optionally capped at `cap` elements.
    Threshold { theta: f64, cap: Option<usize> },
}

/// Selection and per-element weights of one row, before V is read.
#[derive(Debug, Clone)]
pub struct PreparedRow {
    pub selection: SparseSelection,
    /// Weight of `selection.kept[i]`.
    pub weights: Vec<f64>,
}

/// Pick the kept set of `scores` (a pre-softmax row) and compute its weights.
pub fn prepare_row(
    scores: &[f64],
    mode: ThresholdMode,
    rule: RowRule,
    config: &CompensationConfig,
    e_offline: Option<f64>,
) -> Result<PreparedRow> {
    let n = scores.len();
    match mode {
        ThresholdMode::PreSoftmax => {
            let mut sel = select(scores, rule)?;
            sel.mode = Some(mode);
            let factor = sdc_factor(&mut sel, scores, config, e_offline)?;
            let max = row_max(scores);
            let r_sum = sel.r_sum.expect("set by sdc_factor");
            let weights: Vec<f64> = sel.kept.iter().map(|&i| (scores[i] - max).exp() / r_sum * factor).collect();
            let e = sel.e_estimate.expect("set by sdc_factor");
            sel.beta = Some(e / (r_sum + e));
            Ok(PreparedRow { selection: sel, weights })
        }
        ThresholdMode::PostSoftmax => {
            let probs = row_softmax(scores)?;
            let mut sel = select(&probs, rule)?;
            sel.mode = Some(mode);
            let mut is_kept = vec![false; n];
            for &i in &sel.kept {
                is_kept[i] = true;
            }
            let beta: f64 = probs.iter().zip(&is_kept).filter(|(_, &k)| !k).map(|(p, _)| p).sum();
            sel.beta = Some(beta);
            let weights = sel.kept.iter().map(|&i| probs[i]).collect();
            Ok(PreparedRow { selection: sel, weights })
        }
    }
}

fn select(values: &[f64], rule: RowRule) -> Result<SparseSelection> {
    Ok(match rule {
        RowRule::Dense => SparseSelection::new((0..values.len()).collect(), values.len(), f64::NEG_INFINITY),
        RowRule::TopK(k) => select_topk_baseline(values, k.min(values.len()))?,
        RowRule::Threshold { theta, cap } => {
            let mut sel = select_by_threshold(values, theta);
            if let Some(k) = cap {
                cap_selection(&mut sel, values, k);
            }
            sel
        }
    })
}

/// V rows of a group's union, each read once.
pub struct GatheredRows<'a> {
    index: Vec<usize>,
    rows: Vec<&'a [f64]>,
}

impl<'a> GatheredRows<'a> {
    pub fn gather<V: ValueRows + ?Sized>(values: &'a V, union: &[usize]) -> Self {
        Self { index: union.to_vec(), rows: union.iter().map(|&i| values.value_row(i)).collect() }
    }

    fn row(&self, i: usize) -> &'a [f64] {
        let pos = self.index.binary_search(&i).expect("kept index is part of the gathered union");
        self.rows[pos]
    }
}

/// `Σ w_i V_i` over the kept rows, plus `β·μ` when VMC is on.
pub fn finish_row(prepared: &PreparedRow, gathered: &GatheredRows<'_>, mu: &[f64], vmc: bool) -> Result<Vec<f64>> {
    let mut p = vec![0.0; mu.len()];
    for (&i, &w) in prepared.selection.kept.iter().zip(&prepared.weights) {
        for (o, &v) in p.iter_mut().zip(gathered.row(i)) {
            *o += w * v;
        }
    }
    if vmc {
        p = vmc_compensate(&p, prepared.selection.beta.unwrap_or(0.0), mu)?;
    }
    Ok(p)
}

/// Sparse attention of one row over `values`.
pub fn sparse_attend_row<V: ValueRows + ?Sized>(
    scores: &[f64],
    values: &V,
    mu: &[f64],
    mode: ThresholdMode,
    rule: RowRule,
    config: &CompensationConfig,
    e_offline: Option<f64>,
) -> Result<(Vec<f64>, SparseSelection)> {
    let prepared = prepare_row(scores, mode, rule, config, e_offline)?;
    let gathered = GatheredRows::gather(values, &prepared.selection.kept);
    let p = finish_row(&prepared, &gathered, mu, config.vmc)?;
    Ok((p, prepared.selection))
}

/// Outputs of one GQA group for one row position.
#[derive(Debug, Clone)]
pub struct GroupOutput {
    pub outputs: Vec<Vec<f64>>,
    pub selections: Vec<SparseSelection>,
    /// V rows read for the whole group.
    pub union: Vec<usize>,
}

/// Sparse attention for all heads of a group sharing `values`; the union of
/// their kept sets is gathered once.
pub fn sparse_attend_group<V: ValueRows + ?Sized>(
    scores: &[Vec<f64>],
    values: &V,
    mu: &[f64],
    mode: ThresholdMode,
    rules: &[RowRule],
    config: &CompensationConfig,
    e_offline: &[Option<f64>],
) -> Result<GroupOutput> {
    let prepared: Vec<PreparedRow> = scores
        .iter()
        .zip(rules)
        .zip(e_offline)
        .map(|((s, &rule), &e)| prepare_row(s, mode, rule, config, e))
        .collect::<Result<_>>()?;
    let selections: Vec<SparseSelection> = prepared.iter().map(|p| p.selection.clone()).collect();
    let union = gqa_vrow_union(&selections);
    let gathered = GatheredRows::gather(values, &union);
    let outputs = prepared
        .iter()
        .map(|p| finish_row(p, &gathered, mu, config.vmc))
        .collect::<Result<_>>()?;
    Ok(GroupOutput { outputs, selections, union })
}

/// Position of a query head within the model, for table lookups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

/// Rule for `row_id` under a Top-θ table: rows shorter than the layer's k stay dense.
pub fn threshold_rule(
    table: &ThresholdTable,
    at: HeadRef,
    row_id: usize,
    config: &CompensationConfig,
) -> Result<(RowRule, Option<f64>)> {
    let k = table.k_for_layer(at.layer);
    if row_id < k {
        return Ok((RowRule::Dense, None));
    }
    let theta = lookup_threshold(table, at.layer, at.head, row_id)?;
    let cap = config.capk.then_some(k);
    let e = if config.sdc == SdcEstimator::Offline {
        Some(lookup_e_tilde(table, at.layer, at.head, row_id)?)
    } else {
        None
    };
    Ok((RowRule::Threshold { theta, cap }, e))
}

/// Append one token's K/V and run Top-θ attention for query `q`.
#[allow(clippy::too_many_arguments)]
pub fn sparse_decode_step(
    cache: &mut KvHead,
    q: &[f64],
    k_new: &[f64],
    v_new: &[f64],
    table: &ThresholdTable,
    at: HeadRef,
    config: &CompensationConfig,
    opts: AttentionOptions,
) -> Result<(Vec<f64>, SparseSelection)> {
    config.validate(table.mode)?;
    cache.append(k_new, v_new)?;
    let scores = cache.scores(q, opts)?;
    let row_id = cache.len() - 1;
    let (rule, e) = threshold_rule(table, at, row_id, config)?;
    sparse_attend_row(&scores, &*cache, cache.v_mean(), table.mode, rule, config, e)
}

/// One line of the per-step selection trace (JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub layer: usize,
    pub head: usize,
    pub row_id: usize,
    pub k_tilde: usize,
    pub union: usize,
    pub beta: f64,
    pub sdc_factor: f64,
}

impl SelectionTrace {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Report(format!("bad trace line: {e}")))
    }
}

/// Jaccard overlap of two ascending index sets.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attend, ModelGeometry};
    use crate::calibration::{HeadThresholds, KPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;
    use std::collections::BTreeSet;

    fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()
    }

    /// Records every distinct V row read.
    struct CountingRows<'a> {
        inner: &'a KvHead,
        touched: RefCell<BTreeSet<usize>>,
        reads: RefCell<usize>,
    }

    impl ValueRows for CountingRows<'_> {
        fn num_rows(&self) -> usize {
            self.inner.num_rows()
        }

        fn value_row(&self, i: usize) -> &[f64] {
            self.touched.borrow_mut().insert(i);
            *self.reads.borrow_mut() += 1;
            self.inner.value_row(i)
        }
    }

    fn one_head_table(mode: ThresholdMode, theta: f64, k: usize) -> ThresholdTable {
        let g = ModelGeometry::new(1, 1, 4, 1).unwrap();
        let mut t = ThresholdTable::empty(mode, g, 0.0, KPolicy::uniform(k, 1));
        *t.head_mut(0, 0) = HeadThresholds { row_ids: vec![0], thetas: vec![theta], e_tilde: None };
        t
    }

    #[test]
    fn threshold_selection_examples() {
        assert_eq!(select_by_threshold(&[0.1, 0.9, 0.4, 0.7], 0.4).kept, vec![1, 3]);
        assert_eq!(select_by_threshold(&[0.1, 0.9, 0.4], f64::NEG_INFINITY).kept, vec![0, 1, 2]);
        assert_eq!(select_by_threshold(&[0.1, 0.9, 0.4], 0.9).kept, vec![1]);
        assert_eq!(select_by_threshold(&[0.1, 0.9, 0.4], 5.0).kept, vec![1]);
    }

    #[test]
    fn lookup_uses_nearest_row() {
        let g = ModelGeometry::new(1, 1, 4, 1).unwrap();
        let mut t = ThresholdTable::empty(ThresholdMode::PreSoftmax, g, 0.0, KPolicy::uniform(1, 1));
        *t.head_mut(0, 0) = HeadThresholds { row_ids: vec![100, 200], thetas: vec![1.0, 2.0], e_tilde: None };
        assert_eq!(lookup_threshold(&t, 0, 0, 149).unwrap(), 1.0);
        assert_eq!(lookup_threshold(&t, 0, 0, 200).unwrap(), 2.0);
        let empty = ThresholdTable::empty(ThresholdMode::PreSoftmax, g, 0.0, KPolicy::uniform(1, 1));
        assert!(matches!(lookup_threshold(&empty, 0, 0, 5), Err(Error::NoCalibratedRows { .. })));
        assert!(matches!(lookup_e_tilde(&t, 0, 0, 5), Err(Error::MissingCompensation { .. })));
    }

    #[test]
    fn exact_sdc_recovers_full_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [4, 17, 256, 1000] {
            let row = random_row(&mut rng, n);
            let theta = order_statistic(&row, n / 2).unwrap();
            let mut sel = select_by_threshold(&row, theta);
            let config = CompensationConfig { sdc: SdcEstimator::Exact, ..Default::default() };
            let factor = sdc_factor(&mut sel, &row, &config, None).unwrap();
            let kept: Vec<f64> = sel.kept.iter().map(|&i| row[i]).collect();
            let sparse = row_softmax(&kept).unwrap();
            let full = row_softmax(&row).unwrap();
            for (s, &i) in sparse.iter().zip(&sel.kept) {
                assert!(((s * factor) - full[i]).abs() <= 1e-12 * full[i].max(1e-300));
            }
        }
    }

    #[test]
    fn sdc_factor_is_one_when_everything_is_kept() {
        let row = [0.3, -1.0, 2.0];
        for sdc in [SdcEstimator::Exact, SdcEstimator::ExpThreshold] {
            let mut sel = select_by_threshold(&row, f64::NEG_INFINITY);
            let config = CompensationConfig { sdc, ..Default::default() };
            assert_eq!(sdc_factor(&mut sel, &row, &config, None).unwrap(), 1.0);
        }
    }

    #[test]
    fn exp_threshold_factor_is_a_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gaps = Vec::new();
        for _ in 0..200 {
            let row = random_row(&mut rng, 300);
            let theta = order_statistic(&row, 268).unwrap();
            let mut approx = select_by_threshold(&row, theta);
            let mut exact = approx.clone();
            let f = sdc_factor(&mut approx, &row, &CompensationConfig { sdc: SdcEstimator::ExpThreshold, ..Default::default() }, None)
                .unwrap();
            let e = sdc_factor(&mut exact, &row, &CompensationConfig { sdc: SdcEstimator::Exact, ..Default::default() }, None)
                .unwrap();
            assert!(f > 0.0 && f <= 1.0);
            gaps.push((f - e).abs());
        }
        assert!(gaps.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn offline_sdc_requires_a_value() {
        let mut sel = select_by_threshold(&[1.0, 2.0], 1.5);
        let config = CompensationConfig { sdc: SdcEstimator::Offline, ..Default::default() };
        assert!(sdc_factor(&mut sel, &[1.0, 2.0], &config, None).is_err());
        assert!(sdc_factor(&mut sel, &[1.0, 2.0], &config, Some(0.5)).unwrap() < 1.0);
    }

    #[test]
    fn vmc_examples() {
        assert_eq!(vmc_compensate(&[1.0, 2.0], 0.0, &[5.0, 5.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(vmc_compensate(&[1.0, 2.0], 0.5, &[2.0, 4.0]).unwrap(), vec![2.0, 4.0]);
        assert!(vmc_compensate(&[1.0], 0.5, &[2.0, 4.0]).is_err());
    }

    #[test]
    fn constant_v_rows_make_vmc_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cache = KvHead::new(3);
        let c = 0.625;
        for _ in 0..64 {
            let k: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            cache.append(&k, &[c, c, c]).unwrap();
        }
        let q = [0.4, -0.2, 0.9];
        let dense = attend(&cache, &q, AttentionOptions::standard()).unwrap();
        let s = &dense.s;
        let theta = order_statistic(s, 50).unwrap();
        let config = CompensationConfig { vmc: true, ..Default::default() };
        let (p, _) = sparse_attend_row(
            &dense.a,
            &cache,
            cache.v_mean(),
            ThresholdMode::PostSoftmax,
            RowRule::Threshold { theta, cap: None },
            &config,
            None,
        )
        .unwrap();
        for (x, y) in p.iter().zip(&dense.p) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn capk_keeps_highest_then_edges() {
        let row = [1.0, 5.0, 1.0, 1.0, 1.0, 1.0];
        let mut sel = select_by_threshold(&row, 0.0);
        cap_selection(&mut sel, &row, 3);
        assert_eq!(sel.kept, vec![0, 1, 5]);
        let mut small = select_by_threshold(&row, 2.0);
        cap_selection(&mut small, &row, 3);
        assert_eq!(small.kept, vec![1]);
    }

    #[test]
    fn union_bounds_examples() {
        let same = SparseSelection::new(vec![1, 3, 5], 8, 0.0);
        assert_eq!(gqa_vrow_union(&vec![same.clone(); 4]), vec![1, 3, 5]);
        let parts: Vec<SparseSelection> = (0..4).map(|h| SparseSelection::new(vec![2 * h, 2 * h + 1], 8, 0.0)).collect();
        assert_eq!(gqa_vrow_union(&parts).len(), 8);
    }

    #[test]
    fn full_selection_matches_dense_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let table = one_head_table(ThresholdMode::PreSoftmax, f64::NEG_INFINITY, 1);
        let mut sparse_cache = KvHead::new(4);
        let mut dense_cache = KvHead::new(4);
        let at = HeadRef { layer: 0, head: 0 };
        for _ in 0..32 {
            let q = random_row(&mut rng, 4);
            let k = random_row(&mut rng, 4);
            let v = random_row(&mut rng, 4);
            let (p, sel) = sparse_decode_step(&mut sparse_cache, &q, &k, &v, &table, at, &CompensationConfig::none(), AttentionOptions::standard()).unwrap();
            let dense = crate::attention::decode_step(&mut dense_cache, &q, &k, &v, AttentionOptions::standard()).unwrap();
            assert_eq!(sel.kept_count(), dense.a.len());
            for (x, y) in p.iter().zip(&dense.p) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pre_exact_sdc_equals_post_when_sets_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cache = KvHead::new(4);
        for _ in 0..200 {
            cache.append(&random_row(&mut rng, 4), &random_row(&mut rng, 4)).unwrap();
        }
        let q = random_row(&mut rng, 4);
        let dense = attend(&cache, &q, AttentionOptions::standard()).unwrap();
        let keep = 20;
        let pre_theta = order_statistic(&dense.a, dense.a.len() - keep - 1).unwrap();
        let post_theta = order_statistic(&dense.s, dense.s.len() - keep - 1).unwrap();
        let pre_cfg = CompensationConfig { sdc: SdcEstimator::Exact, vmc: true, ..Default::default() };
        let post_cfg = CompensationConfig { vmc: true, ..Default::default() };
        let (p_pre, s_pre) = sparse_attend_row(&dense.a, &cache, cache.v_mean(), ThresholdMode::PreSoftmax, RowRule::Threshold { theta: pre_theta, cap: None }, &pre_cfg, None).unwrap();
        let (p_post, s_post) = sparse_attend_row(&dense.a, &cache, cache.v_mean(), ThresholdMode::PostSoftmax, RowRule::Threshold { theta: post_theta, cap: None }, &post_cfg, None).unwrap();
        assert_eq!(s_pre.kept, s_post.kept);
        for (x, y) in p_pre.iter().zip(&p_post) {
            assert!((x - y).abs() < 1e-10);
        }
        assert!((s_post.beta.unwrap() + s_post.kept.iter().map(|&i| dense.s[i]).sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn v_reads_match_kept_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cache = KvHead::new(4);
        for _ in 0..300 {
            cache.append(&random_row(&mut rng, 4), &random_row(&mut rng, 4)).unwrap();
        }
        let q = random_row(&mut rng, 4);
        let scores = cache.scores(&q, AttentionOptions::standard()).unwrap();
        let counting = CountingRows { inner: &cache, touched: RefCell::default(), reads: RefCell::default() };
        let theta = order_statistic(&scores, 280).unwrap();
        let (_, sel) = sparse_attend_row(&scores, &counting, cache.v_mean(), ThresholdMode::PreSoftmax, RowRule::Threshold { theta, cap: None }, &CompensationConfig::none(), None).unwrap();
        assert_eq!(counting.touched.borrow().len(), sel.kept_count());
        assert_eq!(*counting.reads.borrow(), sel.kept_count());

        let qs: Vec<Vec<f64>> = (0..4).map(|_| random_row(&mut rng, 4)).collect();
        let scores: Vec<Vec<f64>> = qs.iter().map(|q| cache.scores(q, AttentionOptions::standard()).unwrap()).collect();
        let rules: Vec<RowRule> = scores.iter().map(|s| RowRule::Threshold { theta: order_statistic(s, 285).unwrap(), cap: None }).collect();
        let counting = CountingRows { inner: &cache, touched: RefCell::default(), reads: RefCell::default() };
        let out = sparse_attend_group(&scores, &counting, cache.v_mean(), ThresholdMode::PreSoftmax, &rules, &CompensationConfig::none(), &[None; 4]).unwrap();
        assert_eq!(*counting.reads.borrow(), out.union.len());
        let max = out.selections.iter().map(|s| s.kept_count()).max().unwrap();
        let sum: usize = out.selections.iter().map(|s| s.kept_count()).sum();
        assert!(max <= out.union.len() && out.union.len() <= sum);
    }

    #[test]
    fn capk_bounds_kept_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = one_head_table(ThresholdMode::PreSoftmax, -1.0, 8);
        let at = HeadRef { layer: 0, head: 0 };
        let mut capped = KvHead::new(4);
        let mut free = KvHead::new(4);
        let mut exceeded = false;
        for _ in 0..64 {
            let (q, k, v) = (random_row(&mut rng, 4), random_row(&mut rng, 4), random_row(&mut rng, 4));
            let cfg = CompensationConfig { capk: true, ..Default::default() };
            let (_, a) = sparse_decode_step(&mut capped, &q, &k, &v, &table, at, &cfg, AttentionOptions::standard()).unwrap();
            let (_, b) = sparse_decode_step(&mut free, &q, &k, &v, &table, at, &CompensationConfig::none(), AttentionOptions::standard()).unwrap();
            if capped.len() > 8 {
                assert!(a.kept_count() <= 8);
            }
            exceeded |= b.kept_count() > 8;
        }
        assert!(exceeded);
    }

    #[test]
    fn config_eligibility() {
        let post = ThresholdMode::PostSoftmax;
        let pre = ThresholdMode::PreSoftmax;
        assert!(CompensationConfig { sdc: SdcEstimator::Exact, ..Default::default() }.validate(post).is_err());
        assert!(CompensationConfig { vmc: true, ..Default::default() }.validate(pre).is_err());
        assert!(CompensationConfig { vmc: true, sdc: SdcEstimator::ExpThreshold, ..Default::default() }.validate(pre).is_ok());
        assert!(CompensationConfig { vmc: true, ..Default::default() }.validate(post).is_ok());
    }

    #[test]
    fn trace_lines_round_trip() {
        let t = SelectionTrace { layer: 1, head: 2, row_id: 300, k_tilde: 31, union: 70, beta: 0.125, sdc_factor: 1.0 };
        assert_eq!(SelectionTrace::from_line(&t.to_line()).unwrap(), t);
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(jaccard(&[1, 2, 3], &[2, 3, 4]), 0.5);
    }

    proptest::proptest! {
        #[test]
        fn raising_theta_never_adds_elements(row in proptest::collection::vec(-10.0f64..10.0, 1..100), t in -10.0f64..10.0, dt in 0.0f64..5.0) {
            proptest::prop_assert!(select_by_threshold(&row, t + dt).kept_count() <= select_by_threshold(&row, t).kept_count());
        }

        #[test]
        fn post_beta_complements_kept_mass(row in proptest::collection::vec(-10.0f64..10.0, 2..100), q in 0.0f64..1.0) {
            let probs = row_softmax(&row).unwrap();
            let theta = order_statistic(&probs, ((row.len() - 1) as f64 * q) as usize).unwrap();
            let prepared = prepare_row(&row, ThresholdMode::PostSoftmax, RowRule::Threshold { theta, cap: None }, &CompensationConfig::none(), None).unwrap();
            let kept: f64 = prepared.weights.iter().sum();
            let beta = prepared.selection.beta.unwrap();
            proptest::prop_assert!((beta + kept - 1.0).abs() < 1e-10);
            proptest::prop_assert!((-1e-10..=1.0 + 1e-10).contains(&beta));
        }
    }
}
