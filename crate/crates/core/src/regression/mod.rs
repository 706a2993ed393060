//! Least squares, two-stage least squares and logit with cluster-robust
//! covariance.
//!
//! Every estimator works on a dense design matrix whose columns are visited in
//! order; linearly dependent columns are dropped (later ones first) and
//! reported in [`FitResult::dropped_columns`]. Coefficients, standard errors and
//! covariance entries are indexed by *original* column through the accessor
//! methods, so callers never need to track which columns survived.
//!
//! The cluster sandwich is
//! `(X'WX)^-1 (sum_g X_g'W_g e_g e_g'W_g X_g) (X'WX)^-1`
//! scaled by `G/(G-1) * (N-1)/(N-K)`.

mod iv;
mod logit;
mod qr;

pub use iv::{tsls, IvFit, WEAK_INSTRUMENT_F};
pub use logit::{logit, LogitFit};

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use thiserror::Error;

use qr::Qr;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no full-rank subset of the design columns remains")]
    SingularAfterDrop,
    #[error("cluster-robust covariance needs at least two clusters, found {0}")]
    TooFewClusters(usize),
    #[error("{n} observations cannot identify {k} coefficients")]
    InsufficientObservations { n: usize, k: usize },
    #[error("first stage is rank deficient: {0}")]
    WeakOrRankDeficientFirstStage(String),
    #[error("perfect separation: fitted probabilities pinned at 0 or 1")]
    Separation,
    #[error("logit did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("negative weight at row {0}")]
    NegativeWeight(usize),
}

/// How the coefficient covariance is estimated.
#[derive(Debug, Clone, Copy)]
pub enum Covariance<'a> {
    /// Sandwich clustered on the given ids (one per row).
    Cluster(&'a [i64]),
    /// `s^2 (X'WX)^-1` with `s^2 = sum w e^2 / (N - K)`.
    Classical,
    /// Point estimates only; `vcov` is left at zero.
    None,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Coefficients of the retained columns, in column order.
    pub coefficients: Vec<f64>,
    /// Original indices of the retained columns.
    pub retained: Vec<usize>,
    pub dropped_columns: Vec<usize>,
    /// Covariance of `coefficients`.
    pub vcov: DMatrix<f64>,
    pub r_squared: f64,
    /// `y - X b` on the original (unweighted) scale.
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub n: usize,
    pub n_clusters: usize,
}

impl FitResult {
    fn position(&self, col: usize) -> Option<usize> {
        self.retained.iter().position(|&c| c == col)
    }

    pub fn coef(&self, col: usize) -> Option<f64> {
        self.position(col).map(|p| self.coefficients[p])
    }

    pub fn se(&self, col: usize) -> Option<f64> {
        self.position(col).map(|p| self.vcov[(p, p)].max(0.0).sqrt())
    }

    pub fn cov(&self, a: usize, b: usize) -> Option<f64> {
        Some(self.vcov[(self.position(a)?, self.position(b)?)])
    }

    /// Coefficient vector over all original columns, with dropped ones at zero.
    pub fn full_coefficients(&self, ncols: usize) -> Vec<f64> {
        let mut out = vec![0.0; ncols];
        for (p, &c) in self.retained.iter().enumerate() {
            out[c] = self.coefficients[p];
        }
        out
    }

    /// Wald F statistic for the joint hypothesis that every listed column is
    /// zero. `None` when a column was dropped or the block covariance is
    /// singular.
    pub fn wald_f(&self, cols: &[usize]) -> Option<f64> {
        let pos: Vec<usize> = cols.iter().map(|&c| self.position(c)).collect::<Option<_>>()?;
        let q = pos.len();
        if q == 0 {
            return None;
        }
        let b = DVector::from_iterator(q, pos.iter().map(|&p| self.coefficients[p]));
        let v = DMatrix::from_fn(q, q, |i, j| self.vcov[(pos[i], pos[j])]);
        let vinv = v.try_inverse()?;
        let stat = (b.transpose() * vinv * &b)[(0, 0)];
        Some(stat / q as f64)
    }
}

/// Builds a column-major design from a list of equally long columns.
pub fn design(columns: &[Vec<f64>]) -> DMatrix<f64> {
    let n = columns.first().map_or(0, |c| c.len());
    DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i])
}

/// Weighted least squares with a cluster sandwich covariance.
pub fn ols(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    clusters: &[i64],
) -> Result<FitResult, RegressionError> {
    ols_with(x, y, weights, Covariance::Cluster(clusters))
}

pub fn ols_with(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    covariance: Covariance<'_>,
) -> Result<FitResult, RegressionError> {
    let n = x.nrows();
    if y.len() != n {
        return Err(RegressionError::DimensionMismatch(format!("X has {n} rows, y has {}", y.len())));
    }
    if let Covariance::Cluster(c) = covariance {
        if c.len() != n {
            return Err(RegressionError::DimensionMismatch(format!(
                "X has {n} rows, clusters has {}",
                c.len()
            )));
        }
    }
    let sqrt_w = sqrt_weights(weights, n)?;
    let xw = scale_rows(x, &sqrt_w);
    let yw: Vec<f64> = y.iter().zip(&sqrt_w).map(|(v, s)| v * s).collect();

    let qr = Qr::new(&xw);
    let k = qr.rank();
    if k == 0 {
        return Err(RegressionError::SingularAfterDrop);
    }
    if n <= k && !matches!(covariance, Covariance::None) {
        return Err(RegressionError::InsufficientObservations { n, k });
    }
    let beta = qr.solve(&yw);
    let xr = select_columns(x, &qr.retained);
    let fitted: Vec<f64> = (&xr * &beta).iter().copied().collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();

    let bread = qr.bread();
    let xwr = select_columns(&xw, &qr.retained);
    let ew: Vec<f64> = residuals.iter().zip(&sqrt_w).map(|(e, s)| e * s).collect();
    let (vcov, n_clusters) = covariance_matrix(&xwr, &ew, &bread, covariance)?;

    Ok(FitResult {
        coefficients: beta.iter().copied().collect(),
        retained: qr.retained.clone(),
        dropped_columns: qr.dropped.clone(),
        vcov,
        r_squared: r_squared(y, &residuals, weights),
        residuals,
        fitted,
        n,
        n_clusters,
    })
}

pub(crate) fn sqrt_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>, RegressionError> {
    match weights {
        None => Ok(vec![1.0; n]),
        Some(w) => {
            if w.len() != n {
                return Err(RegressionError::DimensionMismatch(format!(
                    "X has {n} rows, weights has {}",
                    w.len()
                )));
            }
            w.iter()
                .enumerate()
                .map(|(i, &v)| if v < 0.0 || v.is_nan() { Err(RegressionError::NegativeWeight(i)) } else { Ok(v.sqrt()) })
                .collect()
        }
    }
}

pub(crate) fn scale_rows(x: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone();
    for (i, &si) in s.iter().enumerate() {
        if si != 1.0 {
            out.row_mut(i).scale_mut(si);
        }
    }
    out
}

pub(crate) fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

/// Sandwich or classical covariance given the (already weighted) regressors
/// `xs`, weighted residuals `es` and bread `(X'WX)^-1`.
pub(crate) fn covariance_matrix(
    xs: &DMatrix<f64>,
    es: &[f64],
    bread: &DMatrix<f64>,
    covariance: Covariance<'_>,
) -> Result<(DMatrix<f64>, usize), RegressionError> {
    let n = xs.nrows();
    let k = xs.ncols();
    match covariance {
        Covariance::None => Ok((DMatrix::zeros(k, k), 0)),
        Covariance::Classical => {
            let ssr: f64 = es.iter().map(|e| e * e).sum();
            let s2 = ssr / (n - k) as f64;
            Ok((bread * s2, n))
        }
        Covariance::Cluster(ids) => {
            let mut scores: BTreeMap<i64, DVector<f64>> = BTreeMap::new();
            for i in 0..n {
                let entry = scores.entry(ids[i]).or_insert_with(|| DVector::zeros(k));
                for j in 0..k {
                    entry[j] += xs[(i, j)] * es[i];
                }
            }
            let g = scores.len();
            if g < 2 {
                return Err(RegressionError::TooFewClusters(g));
            }
            let mut meat = DMatrix::zeros(k, k);
            for s in scores.values() {
                meat.ger(1.0, s, s, 1.0);
            }
            let factor = (g as f64 / (g - 1) as f64) * ((n - 1) as f64 / (n - k) as f64);
            let v = bread * meat * bread * factor;
            // symmetrize round-off
            let v = (&v + v.transpose()) * 0.5;
            Ok((v, g))
        }
    }
}

fn r_squared(y: &[f64], residuals: &[f64], weights: Option<&[f64]>) -> f64 {
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let sw: f64 = (0..y.len()).map(w).sum();
    if sw == 0.0 {
        return 0.0;
    }
    let mean = (0..y.len()).map(|i| w(i) * y[i]).sum::<f64>() / sw;
    let sst: f64 = (0..y.len()).map(|i| w(i) * (y[i] - mean).powi(2)).sum();
    let scale: f64 = (0..y.len()).map(|i| w(i) * y[i] * y[i]).sum();
    if sst <= 1e-24 * scale || sst == 0.0 {
        return 0.0;
    }
    let ssr: f64 = (0..y.len()).map(|i| w(i) * residuals[i].powi(2)).sum();
    1.0 - ssr / sst
}
