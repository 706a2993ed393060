use nalgebra::DMatrix;

use super::qr::Qr;
use super::{covariance_matrix, scale_rows, select_columns, Covariance, FitResult, RegressionError};

const MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-8;
const LOGLIK_TOL: f64 = 1e-10;
/// Linear predictors beyond this magnitude put fitted probabilities within
/// about 2e-9 of the boundary; treated as separation.
const SEPARATION_ETA: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct LogitFit {
    /// Coefficients on the log-odds scale; `r_squared` holds the pseudo-R²
    /// and `fitted` the probabilities.
    pub fit: FitResult,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub iterations: usize,
}

impl LogitFit {
    pub fn pseudo_r_squared(&self) -> f64 {
        self.fit.r_squared
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn log_likelihood(y: &[f64], eta: &[f64]) -> f64 {
    // log(1 + e^eta) computed stably
    y.iter()
        .zip(eta)
        .map(|(&yi, &e)| {
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            yi * e - softplus
        })
        .sum()
}

/// Maximum-likelihood logit by iteratively reweighted least squares, with a
/// cluster sandwich on the score.
pub fn logit(x: &DMatrix<f64>, y: &[f64], clusters: &[i64]) -> Result<LogitFit, RegressionError> {
    let n = x.nrows();
    if y.len() != n || clusters.len() != n {
        return Err(RegressionError::DimensionMismatch(format!(
            "X has {n} rows, y has {}, clusters has {}",
            y.len(),
            clusters.len()
        )));
    }
    if let Some(bad) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(RegressionError::DimensionMismatch(format!("outcome at row {bad} is not binary")));
    }
    let base = Qr::new(x);
    let cols = base.retained.clone();
    let k = cols.len();
    if k == 0 {
        return Err(RegressionError::SingularAfterDrop);
    }
    if n <= k {
        return Err(RegressionError::InsufficientObservations { n, k });
    }
    let xr = select_columns(x, &cols);

    let mut beta = nalgebra::DVector::zeros(k);
    let mut eta: Vec<f64> = vec![0.0; n];
    let mut ll = log_likelihood(y, &eta);
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=MAX_ITER {
        iterations = iter;
        let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let resid: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a - b).collect();
        let score = xr.transpose() * nalgebra::DVector::from_column_slice(&resid);
        if score.amax() < SCORE_TOL {
            converged = true;
            break;
        }
        let sw: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).sqrt()).collect();
        if sw.iter().any(|&s| s < 1e-150) {
            return Err(RegressionError::Separation);
        }
        let xw = scale_rows(&xr, &sw);
        let qr = Qr::new(&xw);
        if qr.rank() < k {
            return Err(RegressionError::Separation);
        }
        let z: Vec<f64> = resid.iter().zip(&sw).map(|(r, s)| r / s).collect();
        let step = qr.solve(&z);

        // Newton step with halving as a safeguard
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let cand_eta: Vec<f64> = (&xr * &cand).iter().copied().collect();
            let cand_ll = log_likelihood(y, &cand_eta);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                let change = (cand_ll - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                if change < LOGLIK_TOL {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || converged {
            converged = converged || !accepted;
            break;
        }
    }

    if eta.iter().any(|e| e.abs() > SEPARATION_ETA) {
        return Err(RegressionError::Separation);
    }
    if !converged {
        return Err(RegressionError::NoConvergence(MAX_ITER));
    }

    let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
    let resid: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a - b).collect();
    let sw: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).sqrt()).collect();
    let xw = scale_rows(&xr, &sw);
    let bread = Qr::new(&xw).bread();
    // score contributions x_i (y_i - p_i): pass unweighted X with raw residuals
    let (vcov, n_clusters) = covariance_matrix(&xr, &resid, &bread, Covariance::Cluster(clusters))?;

    let ybar = y.iter().sum::<f64>() / n as f64;
    let null_ll = if ybar <= 0.0 || ybar >= 1.0 {
        0.0
    } else {
        n as f64 * (ybar * ybar.ln() + (1.0 - ybar) * (1.0 - ybar).ln())
    };
    let pseudo = if null_ll == 0.0 { 0.0 } else { 1.0 - ll / null_ll };

    Ok(LogitFit {
        fit: FitResult {
            coefficients: beta.iter().copied().collect(),
            retained: cols,
            dropped_columns: base.dropped.clone(),
            vcov,
            r_squared: pseudo,
            residuals: resid,
            fitted: p,
            n,
            n_clusters,
        },
        log_likelihood: ll,
        null_log_likelihood: null_ll,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::design;

    #[test]
    fn intercept_only_recovers_log_odds() {
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let x = design(&[vec![1.0; 8]]);
        let ids: Vec<i64> = (0..8).collect();
        let fit = logit(&x, &y, &ids).unwrap();
        let p: f64 = 5.0 / 8.0;
        assert!((fit.fit.coefficients[0] - (p / (1.0 - p)).ln()).abs() < 1e-9);
        assert!(fit.pseudo_r_squared().abs() < 1e-12);
    }

    #[test]
    fn separated_data_is_detected() {
        let xs = vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let x = design(&[vec![1.0; 6], xs]);
        let ids: Vec<i64> = (0..6).collect();
        assert_eq!(logit(&x, &y, &ids).unwrap_err(), RegressionError::Separation);
    }

    #[test]
    fn non_binary_outcome_rejected() {
        let x = design(&[vec![1.0; 3]]);
        assert!(logit(&x, &[0.0, 0.5, 1.0], &[1, 2, 3]).is_err());
    }
}
