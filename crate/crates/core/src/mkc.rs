//! Multi-k cumulative calibration.
//!
//! Every calibration row is sorted and turned into a sequence of half-open
//! threshold intervals, each tagged with the number of elements a threshold
//! inside it keeps (its effective k). The sequences collected for one
//! (layer, head, row id) are merged into the step function `k̄(θ)`, the mean
//! effective k over the calibration rows, which is then inverted at the
//! requested k. One pass over the calibration set therefore serves any k.
//!
//! Merging: over the hull of all emitted intervals each sequence contributes
//! its exact survivor count, including the saturated values outside its own
//! range (`n` below its minimum, 0 at or above its maximum). This keeps `k̄`
//! nonincreasing and equal to the brute-force mean survivor count. Pieces
//! that no sequence's own intervals cover are left out.

use std::collections::BTreeMap;

use crate::attention::{attention_scores, AttentionOptions, ModelGeometry};
use crate::calibration::{KPolicy, ThresholdMode, ThresholdTable};
use crate::error::{Error, Result};
use crate::tensor::{row_softmax, Matrix};
use crate::workload::{LayerAttention, LayerInputs, Sample, Workload};

/// `⟨effective_k, [lo, hi)⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub effective_k: u32,
    pub lo: f64,
    pub hi: f64,
}

/// Contiguous intervals of one sorted row, ascending in threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSequence {
    row_len: usize,
    intervals: Vec<Interval>,
}

impl IntervalSequence {
    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    /// Survivors of strict `> theta` filtering, as this sequence encodes it.
    pub fn effective_k_at(&self, theta: f64) -> u32 {
        let first = self.intervals.first().expect("sequences are never empty");
        if theta < first.lo {
            return self.row_len as u32;
        }
        self.intervals
            .iter()
            .find(|iv| theta >= iv.lo && theta < iv.hi)
            .map_or(0, |iv| iv.effective_k)
    }
}

/// Interval sequence of a row; `subsample` keeps every s-th interval boundary.
///
/// Zero-width intervals from tied values are dropped. With `subsample = 1`
/// a threshold inside an interval keeps exactly its effective k elements.
pub fn row_to_intervals(row: &[f64], subsample: usize) -> Result<IntervalSequence> {
    let n = row.len();
    if n < 2 {
        return Err(Error::InvalidIntervals(format!("row of length {n} has no intervals")));
    }
    if subsample == 0 {
        return Err(Error::InvalidIntervals("subsample must be at least 1".into()));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidIntervals("row contains non-finite values".into()));
    }
    let mut sorted = row.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    // Distinct values with the survivor count of a threshold placed on each.
    let mut distinct: Vec<(f64, u32)> = Vec::with_capacity(n);
    for (j, &v) in sorted.iter().enumerate() {
        let survivors = (n - 1 - j) as u32;
        match distinct.last_mut() {
            Some(last) if last.0 == v => last.1 = survivors,
            _ => distinct.push((v, survivors)),
        }
    }
    if distinct.len() < 2 {
        return Err(Error::InvalidIntervals("row has a single distinct value".into()));
    }
    let last = distinct.len() - 1;
    let intervals = (0..last)
        .step_by(subsample)
        .map(|i| Interval {
            effective_k: distinct[i].1,
            lo: distinct[i].0,
            hi: distinct[(i + subsample).min(last)].0,
        })
        .collect();
    Ok(IntervalSequence { row_len: n, intervals })
}

/// One piece of the merged step function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergedPiece {
    pub lo: f64,
    pub hi: f64,
    /// Sum of effective k over all sequences; `k̄ = k_sum / num_sequences`.
    pub k_sum: i64,
    /// Sequences whose own emitted intervals cover this piece.
    pub covering: u32,
}

/// `k̄(θ)` over the merged calibration rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedIntervalFunction {
    num_sequences: usize,
    pieces: Vec<MergedPiece>,
}

impl MergedIntervalFunction {
    pub fn pieces(&self) -> &[MergedPiece] {
        &self.pieces
    }

    pub fn num_sequences(&self) -> usize {
        self.num_sequences
    }

    pub fn k_bar(&self, piece: &MergedPiece) -> f64 {
        piece.k_sum as f64 / self.num_sequences as f64
    }

    /// Sorted distinct piece boundaries.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = Vec::with_capacity(self.pieces.len() + 1);
        for p in &self.pieces {
            if b.last() != Some(&p.lo) {
                b.push(p.lo);
            }
            b.push(p.hi);
        }
        b.dedup();
        b
    }

    /// `k̄(θ)`, or `None` outside the covered pieces.
    pub fn eval(&self, theta: f64) -> Option<f64> {
        let i = self.pieces.partition_point(|p| p.hi <= theta);
        self.pieces
            .get(i)
            .filter(|p| p.lo <= theta)
            .map(|p| self.k_bar(p))
    }

    /// Achievable `[k_min, k_max]`.
    pub fn k_range(&self) -> (f64, f64) {
        let first = self.pieces.first().map_or(0.0, |p| self.k_bar(p));
        let last = self.pieces.last().map_or(0.0, |p| self.k_bar(p));
        (last, first)
    }

    /// Maximal runs of equal `k̄`: (k_sum, lo, hi).
    fn levels(&self) -> Vec<(i64, f64, f64)> {
        let mut levels: Vec<(i64, f64, f64)> = Vec::new();
        for p in &self.pieces {
            match levels.last_mut() {
                Some(level) if level.0 == p.k_sum => level.2 = p.hi,
                _ => levels.push((p.k_sum, p.lo, p.hi)),
            }
        }
        levels
    }
}

/// Merge interval sequences by averaging the effective k of every sequence
/// over each elementary piece.
pub fn merge_intervals(sequences: &[IntervalSequence]) -> Result<MergedIntervalFunction> {
    if sequences.is_empty() {
        return Err(Error::InvalidIntervals("nothing to merge".into()));
    }
    // (position, delta of the k sum, delta of coverage)
    let mut events: Vec<(f64, i64, i32)> = Vec::new();
    let mut total: i64 = 0;
    for seq in sequences {
        let ivs = &seq.intervals;
        let n = seq.row_len as i64;
        total += n;
        events.push((ivs[0].lo, ivs[0].effective_k as i64 - n, 1));
        for pair in ivs.windows(2) {
            events.push((pair[1].lo, pair[1].effective_k as i64 - pair[0].effective_k as i64, 0));
        }
        let last = ivs[ivs.len() - 1];
        events.push((last.hi, -(last.effective_k as i64), -1));
    }
    events.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    let mut pieces = Vec::new();
    let mut covering: i32 = 0;
    let mut i = 0;
    while i < events.len() {
        let pos = events[i].0;
        while i < events.len() && events[i].0 == pos {
            total += events[i].1;
            covering += events[i].2;
            i += 1;
        }
        if let Some(next) = events.get(i) {
            if covering > 0 {
                pieces.push(MergedPiece { lo: pos, hi: next.0, k_sum: total, covering: covering as u32 });
            }
        }
    }
    Ok(MergedIntervalFunction { num_sequences: sequences.len(), pieces })
}

/// Threshold achieving mean effective k = `k` on the merged rows.
///
/// Where `k̄ = k` on a run of pieces, the midpoint of that run is returned;
/// between two runs the threshold is interpolated linearly between their
/// midpoints.
pub fn invert_at_k(f: &MergedIntervalFunction, k: f64) -> Result<f64> {
    let levels = f.levels();
    let m = f.num_sequences as f64;
    let (k_min, k_max) = f.k_range();
    if levels.is_empty() || !(k >= k_min && k <= k_max) {
        return Err(Error::KNotAchievable { k, k_min, k_max });
    }
    let mid = |l: &(i64, f64, f64)| 0.5 * (l.1 + l.2);
    let target = k * m;
    for (i, level) in levels.iter().enumerate() {
        let here = level.0 as f64;
        if here == target {
            return Ok(mid(level));
        }
        if let Some(next) = levels.get(i + 1) {
            let there = next.0 as f64;
            if here > target && target > there {
                let t = (here - target) / (here - there);
                return Ok(mid(level) + t * (mid(next) - mid(level)));
            }
        }
    }
    // k within range always brackets between levels; fall back to the nearest end.
    Ok(if target >= levels[0].0 as f64 { mid(&levels[0]) } else { mid(&levels[levels.len() - 1]) })
}

/// Knobs bounding the cost of a workload-level multi-k calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiKOptions {
    /// Keep every s-th interval boundary per row.
    pub subsample: usize,
    /// Calibrate only row ids divisible by this stride; lookups use the nearest row.
    pub row_stride: usize,
    /// Largest k the stored inverse covers.
    pub max_k: usize,
}

impl Default for MultiKOptions {
    fn default() -> Self {
        Self { subsample: 1, row_stride: 1, max_k: usize::MAX }
    }
}

/// Collected interval sequences per (layer, head, row id).
#[derive(Debug, Clone)]
pub struct MultiKCalibration {
    pub mode: ThresholdMode,
    pub geometry: ModelGeometry,
    heads: Vec<BTreeMap<u32, Vec<IntervalSequence>>>,
}

impl MultiKCalibration {
    pub fn new(mode: ThresholdMode, geometry: ModelGeometry) -> Self {
        Self { mode, geometry, heads: vec![BTreeMap::new(); geometry.num_layers * geometry.num_heads] }
    }

    pub fn push(&mut self, layer: usize, head: usize, row_id: usize, seq: IntervalSequence) {
        self.heads[layer * self.geometry.num_heads + head].entry(row_id as u32).or_default().push(seq);
    }

    pub fn sequences(&self, layer: usize, head: usize, row_id: usize) -> &[IntervalSequence] {
        self.heads[layer * self.geometry.num_heads + head]
            .get(&(row_id as u32))
            .map_or(&[], Vec::as_slice)
    }

    /// Merge and invert every row at integer k up to `max_k`.
    pub fn finish(&self, max_k: usize) -> Result<MultiKThresholds> {
        let mut heads = Vec::with_capacity(self.heads.len());
        for rows in &self.heads {
            let mut out = Vec::with_capacity(rows.len());
            for (&row_id, seqs) in rows {
                let f = merge_intervals(seqs)?;
                let (lo, hi) = f.k_range();
                let k_first = (lo.ceil() as usize).max(1);
                let k_last = (hi.floor() as usize).min(max_k);
                if k_first > k_last {
                    continue;
                }
                let thetas = (k_first..=k_last)
                    .map(|k| invert_at_k(&f, k as f64))
                    .collect::<Result<Vec<f64>>>()?;
                out.push(MultiKRow { row_id, k_first: k_first as u32, thetas });
            }
            heads.push(out);
        }
        Ok(MultiKThresholds { mode: self.mode, geometry: self.geometry, heads })
    }
}

/// `θ(k)` for integer `k` in `k_first..k_first + thetas.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiKRow {
    pub row_id: u32,
    pub k_first: u32,
    pub thetas: Vec<f64>,
}

impl MultiKRow {
    pub fn theta_for(&self, k: usize) -> Option<f64> {
        k.checked_sub(self.k_first as usize).and_then(|i| self.thetas.get(i).copied())
    }
}

/// Inverted multi-k thresholds, ready to produce a table for any k policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiKThresholds {
    pub mode: ThresholdMode,
    pub geometry: ModelGeometry,
    /// `[layer * num_heads + head]`, sorted by row id.
    pub heads: Vec<Vec<MultiKRow>>,
}

impl MultiKThresholds {
    pub fn head(&self, layer: usize, head: usize) -> &[MultiKRow] {
        &self.heads[layer * self.geometry.num_heads + head]
    }

    /// Single-k table for `policy`; rows shorter than the layer's k or
    /// unable to reach it are left out.
    pub fn table_for(&self, policy: &KPolicy) -> Result<ThresholdTable> {
        policy.check(&self.geometry)?;
        let mut table = ThresholdTable::empty(self.mode, self.geometry, 0.0, policy.clone());
        for layer in 0..self.geometry.num_layers {
            let k = policy.k_for_layer(layer);
            for head in 0..self.geometry.num_heads {
                let slot = table.head_mut(layer, head);
                for row in self.head(layer, head) {
                    if (row.row_id as usize) < k {
                        continue;
                    }
                    if let Some(theta) = row.theta_for(k) {
                        slot.row_ids.push(row.row_id);
                        slot.thetas.push(theta);
                    }
                }
            }
        }
        Ok(table)
    }
}

/// Dense forward pass collecting interval sequences for every calibrated row.
pub fn calibrate_multi_k(
    workload: &Workload,
    samples: &[Sample],
    mode: ThresholdMode,
    options: MultiKOptions,
) -> Result<MultiKThresholds> {
    if samples.is_empty() {
        return Err(Error::Calibration("calibration stream is empty".into()));
    }
    if options.row_stride == 0 || options.subsample == 0 {
        return Err(Error::Calibration("row stride and subsample must be positive".into()));
    }
    let mut pass = MultiKPass {
        collected: MultiKCalibration::new(mode, *workload.geometry()),
        options,
        opts: workload.attention_options(),
    };
    for sample in samples {
        workload.prefill(sample, &mut pass)?;
    }
    pass.collected.finish(options.max_k)
}

struct MultiKPass {
    collected: MultiKCalibration,
    options: MultiKOptions,
    opts: AttentionOptions,
}

impl LayerAttention for MultiKPass {
    fn attend_layer(&mut self, layer: usize, inputs: &LayerInputs, g: &ModelGeometry) -> Result<Vec<Matrix>> {
        let mut outputs = Vec::with_capacity(g.num_heads);
        for h in 0..g.num_heads {
            let kv = g.kv_head_of(h);
            let a = attention_scores(&inputs.q[h], &inputs.k[kv], self.opts)?;
            let n = a.rows();
            let mut s = Matrix::zeros(n, n);
            for r in 0..n {
                let probs = row_softmax(&a.row(r)[..=r])?;
                if r >= 1 && r % self.options.row_stride == 0 {
                    let row = match self.collected.mode {
                        ThresholdMode::PreSoftmax => &a.row(r)[..=r],
                        ThresholdMode::PostSoftmax => &probs[..],
                    };
                    // A row of identical values carries no threshold information.
                    if let Ok(seq) = row_to_intervals(row, self.options.subsample) {
                        self.collected.push(layer, h, r, seq);
                    }
                }
                s.row_mut(r)[..=r].copy_from_slice(&probs);
            }
            outputs.push(s.matmul(&inputs.v[kv])?);
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::row_threshold;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn survivors(row: &[f64], theta: f64) -> usize {
        row.iter().filter(|&&v| v > theta).count()
    }

    fn kept(row: &[f64], theta: f64) -> Vec<usize> {
        (0..row.len()).filter(|&i| row[i] > theta).collect()
    }

    #[test]
    fn intervals_of_small_rows() {
        let seq = row_to_intervals(&[3.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(
            seq.intervals(),
            &[
                Interval { effective_k: 2, lo: 1.0, hi: 2.0 },
                Interval { effective_k: 1, lo: 2.0, hi: 3.0 }
            ]
        );
        // Brute force at thresholds inside each piece.
        assert_eq!(survivors(&[3.0, 1.0, 2.0], 1.5), 2);
        assert_eq!(survivors(&[3.0, 1.0, 2.0], 2.5), 1);

        let seq = row_to_intervals(&[0.0, 10.0], 1).unwrap();
        assert_eq!(seq.intervals(), &[Interval { effective_k: 1, lo: 0.0, hi: 10.0 }]);
    }

    #[test]
    fn tied_values_drop_zero_width_pieces() {
        let row = [5.0, 5.0, 1.0];
        let seq = row_to_intervals(&row, 1).unwrap();
        assert_eq!(seq.intervals(), &[Interval { effective_k: 2, lo: 1.0, hi: 5.0 }]);
        assert_eq!(survivors(&row, 3.0), 2);
        assert_eq!(survivors(&row, 5.0), 0);
    }

    #[test]
    fn short_rows_are_rejected() {
        assert!(row_to_intervals(&[1.0], 1).is_err());
        assert!(row_to_intervals(&[1.0, 1.0], 1).is_err());
        assert!(row_to_intervals(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn single_sequence_merge_is_its_step_function() {
        let seq = row_to_intervals(&[0.3, -1.0, 2.5, 0.9], 1).unwrap();
        let f = merge_intervals(std::slice::from_ref(&seq)).unwrap();
        assert_eq!(f.pieces().len(), seq.intervals().len());
        for (p, iv) in f.pieces().iter().zip(seq.intervals()) {
            assert_eq!((p.lo, p.hi), (iv.lo, iv.hi));
            assert_eq!(f.k_bar(p), iv.effective_k as f64);
        }
        let twice = merge_intervals(&[seq.clone(), seq.clone()]).unwrap();
        for (a, b) in f.pieces().iter().zip(twice.pieces()) {
            assert_eq!((a.lo, a.hi, f.k_bar(a)), (b.lo, b.hi, twice.k_bar(b)));
        }
    }

    #[test]
    fn merged_function_matches_probe_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let rows: Vec<Vec<f64>> = (0..2).map(|_| (0..40).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let seqs: Vec<IntervalSequence> = rows.iter().map(|r| row_to_intervals(r, 1).unwrap()).collect();
        let f = merge_intervals(&seqs).unwrap();
        let lo = f.pieces().first().unwrap().lo;
        let hi = f.pieces().last().unwrap().hi;
        for i in 0..100 {
            let theta = lo + (hi - lo) * (i as f64 + 0.5) / 100.0;
            let brute = rows.iter().map(|r| survivors(r, theta) as f64).sum::<f64>() / rows.len() as f64;
            let got = f.eval(theta).unwrap();
            assert!((got - brute).abs() < 1e-12, "theta {theta}: {got} vs {brute}");
        }
        assert!(f.eval(lo - 1.0).is_none());
        assert!(f.eval(hi).is_none());
    }

    #[test]
    fn uncovered_gaps_are_absent() {
        let a = row_to_intervals(&[0.0, 1.0], 1).unwrap();
        let b = row_to_intervals(&[5.0, 6.0], 1).unwrap();
        let f = merge_intervals(&[a, b]).unwrap();
        assert_eq!(f.pieces().len(), 2);
        assert!(f.eval(3.0).is_none());
        assert_eq!(f.eval(0.5), Some(1.5));
        assert_eq!(f.eval(5.5), Some(0.5));
    }

    #[test]
    fn single_row_inversion_matches_topk() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let f = merge_intervals(&[row_to_intervals(&row, 1).unwrap()]).unwrap();
        assert_eq!(f.k_range(), (1.0, 63.0));
        for k in 1..64 {
            let theta = invert_at_k(&f, k as f64).unwrap();
            assert_eq!(survivors(&row, theta), k);
            let single = row_threshold(&row, k).unwrap();
            assert_eq!(kept(&row, theta), kept(&row, single));
        }
        let lowest = f.pieces()[0];
        let theta = invert_at_k(&f, 63.0).unwrap();
        assert!(theta >= lowest.lo && theta < lowest.hi);
        assert!(matches!(invert_at_k(&f, 64.0), Err(Error::KNotAchievable { .. })));
        assert!(matches!(invert_at_k(&f, 0.5), Err(Error::KNotAchievable { .. })));
    }

    #[test]
    fn replayed_multi_row_inverse_hits_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..200).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let seqs: Vec<IntervalSequence> = rows.iter().map(|r| row_to_intervals(r, 1).unwrap()).collect();
        let f = merge_intervals(&seqs).unwrap();
        let theta = invert_at_k(&f, 16.0).unwrap();
        let mean = rows.iter().map(|r| survivors(r, theta) as f64).sum::<f64>() / 50.0;
        assert!((mean - 16.0).abs() <= 1.0, "{mean}");
        assert!(f.pieces().len() <= 50 * 200 - 1);
        assert!(f.breakpoints().len() <= 50 * 200);
    }

    #[test]
    fn subsampling_shrinks_sequences() {
        let row: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let full = row_to_intervals(&row, 1).unwrap();
        let coarse = row_to_intervals(&row, 8).unwrap();
        assert_eq!(full.intervals().len(), 99);
        assert_eq!(coarse.intervals().len(), 13);
        assert_eq!(coarse.intervals()[0], Interval { effective_k: 99, lo: 0.0, hi: 8.0 });
        assert_eq!(coarse.intervals().last().unwrap().hi, 99.0);
    }

    proptest! {
        #[test]
        fn merged_k_bar_is_monotone_and_inverse_too(
            rows in prop::collection::vec(prop::collection::vec(-100i32..100, 2..30), 1..6),
        ) {
            let seqs: Vec<IntervalSequence> = rows
                .iter()
                .filter_map(|r| row_to_intervals(&r.iter().map(|&x| x as f64).collect::<Vec<_>>(), 1).ok())
                .collect();
            prop_assume!(!seqs.is_empty());
            let f = merge_intervals(&seqs).unwrap();
            let kb: Vec<f64> = f.pieces().iter().map(|p| f.k_bar(p)).collect();
            prop_assert!(kb.windows(2).all(|w| w[1] <= w[0]));
            let (lo, hi) = f.k_range();
            let mut prev = f64::INFINITY;
            let mut k = lo;
            while k <= hi {
                let theta = invert_at_k(&f, k).unwrap();
                prop_assert!(theta <= prev);
                prev = theta;
                k += 0.37;
            }
        }
    }
}
