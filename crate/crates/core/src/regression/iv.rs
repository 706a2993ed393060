use nalgebra::DMatrix;

use super::qr::Qr;
use super::{covariance_matrix, ols, r_squared, Covariance, FitResult, RegressionError};

/// Conventional rule-of-thumb bound below which the excluded instruments are
/// flagged as weak.
pub const WEAK_INSTRUMENT_F: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct IvFit {
    /// Second stage. Column order is `[endogenous.., exogenous..]`.
    pub second_stage: FitResult,
    /// One regression per endogenous column, column order
    /// `[exogenous.., instruments..]`.
    pub first_stage: Vec<FitResult>,
    /// Cluster-robust Wald F of the excluded instruments in the first stage
    /// of the first endogenous regressor.
    pub f_excluded: f64,
    pub weak_instruments: bool,
    n_exogenous: usize,
}

impl IvFit {
    /// First-stage coefficient of instrument `j` for endogenous column `e`.
    pub fn first_stage_coef(&self, e: usize, j: usize) -> Option<f64> {
        self.first_stage.get(e)?.coef(self.n_exogenous + j)
    }
}

/// Just-identified two-stage least squares, clustered.
///
/// The second-stage covariance uses structural residuals `y - X b` computed
/// with the original endogenous columns, and the fitted first-stage columns
/// in the bread and meat.
pub fn tsls(
    y: &[f64],
    endogenous: &DMatrix<f64>,
    instruments: &DMatrix<f64>,
    exogenous: &DMatrix<f64>,
    clusters: &[i64],
) -> Result<IvFit, RegressionError> {
    let n = y.len();
    let n_endog = endogenous.ncols();
    let n_inst = instruments.ncols();
    let n_exog = exogenous.ncols();
    for (name, m) in [("endogenous", endogenous), ("instruments", instruments), ("exogenous", exogenous)] {
        if m.nrows() != n {
            return Err(RegressionError::DimensionMismatch(format!("{name} has {} rows, y has {n}", m.nrows())));
        }
    }
    if clusters.len() != n {
        return Err(RegressionError::DimensionMismatch(format!("clusters has {} rows, y has {n}", clusters.len())));
    }
    if n_endog == 0 || n_endog != n_inst {
        return Err(RegressionError::DimensionMismatch(format!(
            "need as many instruments as endogenous regressors, got {n_inst} and {n_endog}"
        )));
    }

    let z = concat_columns(exogenous, instruments);
    let z_qr = Qr::new(&z);
    if z_qr.dropped.iter().any(|&c| c >= n_exog) {
        return Err(RegressionError::WeakOrRankDeficientFirstStage(
            "an excluded instrument is collinear with the exogenous regressors".into(),
        ));
    }

    let mut first_stage = Vec::with_capacity(n_endog);
    let mut fitted_cols: Vec<Vec<f64>> = Vec::with_capacity(n_endog);
    for e in 0..n_endog {
        let d: Vec<f64> = endogenous.column(e).iter().copied().collect();
        let fs = ols(&z, &d, None, clusters)?;
        fitted_cols.push(fs.fitted.clone());
        first_stage.push(fs);
    }

    let exog_retained: Vec<usize> = z_qr.retained.iter().copied().filter(|&c| c < n_exog).collect();
    let exog_dropped: Vec<usize> = z_qr.dropped.clone();

    // X-hat = [fitted endogenous.., retained exogenous..]
    let k = n_endog + exog_retained.len();
    let xhat = DMatrix::from_fn(n, k, |i, j| {
        if j < n_endog {
            fitted_cols[j][i]
        } else {
            exogenous[(i, exog_retained[j - n_endog])]
        }
    });
    let x_qr = Qr::new(&xhat);
    if !x_qr.dropped.is_empty() {
        return Err(RegressionError::WeakOrRankDeficientFirstStage(
            "fitted endogenous regressors are collinear with the exogenous regressors".into(),
        ));
    }
    if n <= k {
        return Err(RegressionError::InsufficientObservations { n, k });
    }
    let beta = x_qr.solve(y);

    let x_struct = DMatrix::from_fn(n, k, |i, j| {
        if j < n_endog {
            endogenous[(i, j)]
        } else {
            exogenous[(i, exog_retained[j - n_endog])]
        }
    });
    let fitted: Vec<f64> = (&x_struct * &beta).iter().copied().collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let bread = x_qr.bread();
    let (vcov, n_clusters) = covariance_matrix(&xhat, &residuals, &bread, Covariance::Cluster(clusters))?;

    let mut retained: Vec<usize> = (0..n_endog).collect();
    retained.extend(exog_retained.iter().map(|c| c + n_endog));
    let dropped_columns = exog_dropped.iter().map(|c| c + n_endog).collect();

    let instrument_cols: Vec<usize> = (n_exog..n_exog + n_inst).collect();
    let f_excluded = first_stage[0].wald_f(&instrument_cols).unwrap_or(f64::NAN);
    let weak_instruments = !(f_excluded >= WEAK_INSTRUMENT_F);

    let second_stage = FitResult {
        coefficients: beta.iter().copied().collect(),
        retained,
        dropped_columns,
        vcov,
        r_squared: r_squared(y, &residuals, None),
        residuals,
        fitted,
        n,
        n_clusters,
    };
    Ok(IvFit { second_stage, first_stage, f_excluded, weak_instruments, n_exogenous: n_exog })
}

fn concat_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ka = a.ncols();
    DMatrix::from_fn(n, ka + b.ncols(), |i, j| if j < ka { a[(i, j)] } else { b[(i, j - ka)] })
}
