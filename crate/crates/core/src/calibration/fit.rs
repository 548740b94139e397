//! Weighted least-squares fit of threshold versus row id.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ThresholdObservations, ThresholdTable};
use crate::error::{Error, Result};

/// One basis function of row id `r` (evaluated at `max(r, 1)`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFn {
    Constant,
    /// `1 / r`
    InverseRow,
    /// `ln(r) / r`
    LogOverRow,
    /// `ln(r)`
    Log,
    /// `r`
    Linear,
}

impl BasisFn {
    pub fn eval(self, row_id: f64) -> f64 {
        let r = row_id.max(1.0);
        match self {
            Self::Constant => 1.0,
            Self::InverseRow => 1.0 / r,
            Self::LogOverRow => r.ln() / r,
            Self::Log => r.ln(),
            Self::Linear => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBasis(pub Vec<BasisFn>);

impl Default for CurveBasis {
    /// `c0 + c1/r + c2·ln(r)/r`: flattens to a constant for long rows and
    /// can also follow the decay of post-softmax thresholds.
    fn default() -> Self {
        Self(vec![BasisFn::Constant, BasisFn::InverseRow, BasisFn::LogOverRow])
    }
}

impl CurveBasis {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn features(&self, row_id: f64) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(move |b| b.eval(row_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCurve {
    pub coeffs: Vec<f64>,
    /// Weighted RMS residual: `sqrt(sum w (y - f)^2 / sum w)`.
    pub residual: f64,
}

/// One fitted curve per (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct FittedThresholdCurve {
    pub basis: CurveBasis,
    pub num_heads: usize,
    pub heads: Vec<HeadCurve>,
}

impl FittedThresholdCurve {
    pub fn head(&self, layer: usize, head: usize) -> &HeadCurve {
        &self.heads[layer * self.num_heads + head]
    }

    pub fn eval(&self, layer: usize, head: usize, row_id: usize) -> f64 {
        let c = &self.head(layer, head).coeffs;
        self.basis.features(row_id as f64).zip(c).map(|(f, c)| f * c).sum()
    }
}

/// Fit every (layer, head) of `table`, weighting each row by its sample count.
pub fn fit_threshold_curve(
    table: &ThresholdTable,
    observations: &ThresholdObservations,
    basis: &CurveBasis,
) -> Result<FittedThresholdCurve> {
    if basis.is_empty() {
        return Err(Error::InvalidConfig("curve basis is empty".into()));
    }
    let g = table.geometry;
    let mut heads = Vec::with_capacity(g.num_layers * g.num_heads);
    for layer in 0..g.num_layers {
        for head in 0..g.num_heads {
            let h = table.head(layer, head);
            let weights: Vec<f64> = h
                .row_ids
                .iter()
                .map(|&r| observations.sample_count(layer, head, r as usize) as f64)
                .collect();
            let rows: Vec<f64> = h.row_ids.iter().map(|&r| r as f64).collect();
            heads.push(
                weighted_fit(&rows, &h.thetas, &weights, basis)
                    .map_err(|_| Error::RankDeficient { layer, head })?,
            );
        }
    }
    Ok(FittedThresholdCurve { basis: basis.clone(), num_heads: g.num_heads, heads })
}

/// Solve `min sum w_i (y_i - sum_j c_j f_j(x_i))^2` via QR of the
/// column-normalized, sqrt-weighted design matrix.
pub(crate) fn weighted_fit(x: &[f64], y: &[f64], w: &[f64], basis: &CurveBasis) -> std::result::Result<HeadCurve, ()> {
    let p = basis.len();
    let used: Vec<usize> = (0..x.len()).filter(|&i| w[i] > 0.0).collect();
    if used.len() < p {
        return Err(());
    }
    let m = used.len();
    let mut design = DMatrix::<f64>::zeros(m, p);
    let mut rhs = DVector::<f64>::zeros(m);
    for (row, &i) in used.iter().enumerate() {
        let sw = w[i].sqrt();
        for (col, f) in basis.features(x[i]).enumerate() {
            design[(row, col)] = sw * f;
        }
        rhs[row] = sw * y[i];
    }
    let norms: Vec<f64> = (0..p).map(|c| design.column(c).norm()).collect();
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(());
    }
    for (c, &n) in norms.iter().enumerate() {
        design.column_mut(c).unscale_mut(n);
    }
    let qr = design.qr();
    let r = qr.r();
    let diag_max = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * diag_max) {
        return Err(());
    }
    let qty = qr.q().transpose() * &rhs;
    let scaled = r.solve_upper_triangular(&qty).ok_or(())?;
    let coeffs: Vec<f64> = scaled.iter().zip(&norms).map(|(c, n)| c / n).collect();

    let total_w: f64 = used.iter().map(|&i| w[i]).sum();
    let sse: f64 = used
        .iter()
        .map(|&i| {
            let fit: f64 = basis.features(x[i]).zip(&coeffs).map(|(f, c)| f * c).sum();
            w[i] * (y[i] - fit).powi(2)
        })
        .sum();
    Ok(HeadCurve { coeffs, residual: (sse / total_w).sqrt() })
}
