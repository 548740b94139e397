//! Dense numeric substrate: a row-major `f64` matrix plus the row reductions
//! every other module builds on (stable softmax, exact top-k, order statistics).

use std::cmp::Ordering;

use nalgebra::DMatrixView;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        // Row-major storage read as column-major is the transpose: Cᵀ = Bᵀ·Aᵀ.
        let lhs_t = DMatrixView::from_slice(&self.data, self.cols, self.rows);
        let rhs_t = DMatrixView::from_slice(&other.data, other.cols, other.rows);
        let out_t = rhs_t * lhs_t;
        Ok(Matrix { rows: self.rows, cols: other.cols, data: out_t.data.into() })
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by the transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        self.matmul(&other.transpose())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for (i, row) in self.row_iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out.data[j * self.rows + i] = v;
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Maximum of a row, ignoring NaN. Returns `-inf` for an all-masked row.
pub fn row_max(a: &[f64]) -> f64 {
    a.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(a: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in a.iter().enumerate() {
        match best {
            Some(b) if a[b].total_cmp(&x) != Ordering::Less => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Numerically stable softmax. `-inf` entries map to exactly zero.
pub fn row_softmax(a: &[f64]) -> Result<Vec<f64>> {
    let max = row_max(a);
    if !max.is_finite() {
        return Err(Error::EmptyAttentionRow);
    }
    let mut out: Vec<f64> = a.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// Ordering used by exact top-k: larger values first, lower index first on ties.
#[inline]
pub(crate) fn rank_order(a: &[f64], i: usize, j: usize) -> Ordering {
    a[j].total_cmp(&a[i]).then(i.cmp(&j))
}

/// Indices of the `k` largest values, returned in ascending index order.
pub fn topk_indices(a: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > a.len() {
        return Err(Error::KOutOfRange { k, len: a.len() });
    }
    let mut idx: Vec<usize> = (0..a.len()).collect();
    if k < a.len() {
        idx.select_nth_unstable_by(k - 1, |&i, &j| rank_order(a, i, j));
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Top-k indices (ascending) and the largest value outside them, from one
/// partial selection; needs `k < len`.
pub fn topk_split(a: &[f64], k: usize) -> Result<(Vec<usize>, f64)> {
    if k == 0 || k >= a.len() {
        return Err(Error::KOutOfRange { k, len: a.len() });
    }
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.select_nth_unstable_by(k, |&i, &j| rank_order(a, i, j));
    let rest = a[idx[k]];
    idx.truncate(k);
    idx.sort_unstable();
    Ok((idx, rest))
}

/// The `j`-th smallest value (0-indexed).
pub fn order_statistic(a: &[f64], j: usize) -> Result<f64> {
    if j >= a.len() {
        return Err(Error::IndexOutOfRange { index: j, len: a.len() });
    }
    let mut buf = a.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(j, f64::total_cmp);
    Ok(*nth)
}

/// Mean and population standard deviation; a singleton has zero spread.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_row() {
        let s = row_softmax(&[0.0; 4]).unwrap();
        assert!(s.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_masked_entry_is_zero() {
        let s = row_softmax(&[f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(s, vec![0.0, 1.0]);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // Direct summation at 40 significant digits.
        let expected = [
            0.643_914_259_887_972_3,
            0.236_882_818_089_910_13,
            0.087_144_318_742_032_567,
            0.032_058_603_280_084_988,
        ];
        let s = row_softmax(&[2.0, 1.0, 0.0, -1.0]).unwrap();
        for (got, want) in s.iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let err = row_softmax(&[f64::NEG_INFINITY; 3]).unwrap_err();
        assert!(matches!(err, Error::EmptyAttentionRow));
        assert_eq!(err.to_string(), "empty attention row");
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.9, 0.4, 0.7], 2).unwrap(), vec![1, 3]);
        assert_eq!(topk_indices(&[5.0, 5.0, 5.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk_indices(&[-1.0], 1).unwrap(), vec![0]);
        assert!(topk_indices(&[1.0, 2.0], 3).is_err());
        assert!(topk_indices(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn order_statistic_examples() {
        assert_eq!(order_statistic(&[0.1, 0.9, 0.4, 0.7], 1).unwrap(), 0.4);
        assert_eq!(order_statistic(&[7.0], 0).unwrap(), 7.0);
        assert_eq!(order_statistic(&[3.0, 1.0, 2.0], 2).unwrap(), 3.0);
        assert!(matches!(
            order_statistic(&[3.0, 1.0], 2),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn matmul_transposed_matches_matmul() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0], vec![9.0, 1.0]]).unwrap();
        let bt = Matrix::from_rows(&[vec![5.0, 7.0, 9.0], vec![6.0, 8.0, 1.0]]).unwrap();
        assert_eq!(a.matmul_transposed(&b).unwrap(), a.matmul(&bt).unwrap());
    }

    fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..200)
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(a in row_strategy()) {
            let s = row_softmax(&a).unwrap();
            prop_assert!(s.iter().all(|&x| x >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_is_shift_invariant(a in row_strategy(), c in -100.0f64..100.0) {
            let s = row_softmax(&a).unwrap();
            let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
            let t = row_softmax(&shifted).unwrap();
            for (x, y) in s.iter().zip(&t) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn topk_dominates_the_rest(a in row_strategy(), k_seed in 0usize..1000) {
            let k = 1 + k_seed % a.len();
            let top = topk_indices(&a, k).unwrap();
            prop_assert_eq!(top.len(), k);
            let min_in = top.iter().map(|&i| a[i]).fold(f64::INFINITY, f64::min);
            for i in (0..a.len()).filter(|i| !top.contains(i)) {
                prop_assert!(a[i] <= min_in);
            }
        }

        #[test]
        fn quantile_sits_below_topk(a in prop::collection::hash_set(-1_000_000i64..1_000_000, 2..200), k_seed in 0usize..1000) {
            let a: Vec<f64> = a.into_iter().map(|x| x as f64 / 1000.0).collect();
            let k = 1 + k_seed % (a.len() - 1);
            let q = order_statistic(&a, a.len() - k - 1).unwrap();
            for i in topk_indices(&a, k).unwrap() {
                prop_assert!(q < a[i]);
            }
        }

        #[test]
        fn split_matches_separate_selections(a in row_strategy(), k_seed in 0usize..1000) {
            prop_assume!(a.len() >= 2);
            let k = 1 + k_seed % (a.len() - 1);
            let (top, rest) = topk_split(&a, k).unwrap();
            prop_assert_eq!(top, topk_indices(&a, k).unwrap());
            prop_assert_eq!(rest, order_statistic(&a, a.len() - k - 1).unwrap());
        }
    }

    #[test]
    fn long_row_softmax_sums_to_one() {
        let a: Vec<f64> = (0..100_000).map(|i| ((i * 7919) % 1000) as f64 / 37.0).collect();
        let s = row_softmax(&a).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
