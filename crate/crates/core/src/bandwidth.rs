//! Cross-validated bandwidth choice for the local linear estimators.
//!
//! For a candidate `h`, every record is predicted from a straight line
//! fitted to the records on the same side of the cutoff that lie between it
//! and `h` further away from the cutoff: for `x < 0` the window is
//! `[x - h, x)`, for `x >= 0` it is `(x, x + h]`. The criterion is the mean
//! squared prediction error over records with at least three fitting points.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::CoursePanel;
use crate::rdd::OutcomeMap;
use crate::threshold::Forcing;

pub const MIN_FIT_POINTS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BandwidthError {
    #[error("no candidate bandwidth leaves any record with enough fitting points")]
    NoUsablePoints,
    #[error("candidate bandwidths must be positive and ascending")]
    InvalidCandidates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvProfile {
    pub outcome: String,
    pub candidates: Vec<f64>,
    /// `None` where no record could be predicted.
    pub cv_values: Vec<Option<f64>>,
    pub n_used: Vec<usize>,
    pub chosen: f64,
}

impl CvProfile {
    pub fn write_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["h", "cv", "n_used"])?;
        for ((h, cv), n) in self.candidates.iter().zip(&self.cv_values).zip(&self.n_used) {
            w.write_record([h.to_string(), cv.map_or_else(String::new, |v| v.to_string()), n.to_string()])?;
        }
        w.flush()
    }
}

/// `(relative score, outcome)` for every record with both, sorted by score.
pub fn cv_points(panels: &[CoursePanel], forcing: &Forcing, values: &OutcomeMap) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = panels
        .iter()
        .flat_map(|p| &p.records)
        .filter_map(|r| Some((forcing.get(r.applicant_id)?.relative, values.get(&r.applicant_id)?.0)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts
}

/// Prediction at `x0` from a least-squares line through `pts`, or `None`
/// with fewer than three points or a single distinct abscissa.
pub fn line_prediction(pts: &[(f64, f64)], x0: f64) -> Option<f64> {
    if pts.len() < MIN_FIT_POINTS {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return None;
    }
    Some(my + sxy / sxx * (x0 - mx))
}

/// Mean squared one-sided prediction error at bandwidth `h` over sorted
/// points, with the number of records predicted.
pub fn cv_value(pts: &[(f64, f64)], h: f64) -> (Option<f64>, usize) {
    let mut sse = 0.0;
    let mut used = 0usize;
    for &(x, y) in pts {
        let window = if x < 0.0 {
            let lo = pts.partition_point(|p| p.0 < x - h);
            let hi = pts.partition_point(|p| p.0 < x);
            &pts[lo..hi]
        } else {
            let lo = pts.partition_point(|p| p.0 <= x);
            let hi = pts.partition_point(|p| p.0 <= x + h);
            &pts[lo..hi]
        };
        if let Some(pred) = line_prediction(window, x) {
            sse += (y - pred).powi(2);
            used += 1;
        }
    }
    if used == 0 {
        (None, 0)
    } else {
        (Some(sse / used as f64), used)
    }
}

pub fn cross_validate_points(outcome: &str, pts: &[(f64, f64)], candidates: &[f64]) -> Result<CvProfile, BandwidthError> {
    if candidates.is_empty() || candidates.iter().any(|&h| !(h > 0.0)) || candidates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BandwidthError::InvalidCandidates);
    }
    let evals: Vec<(Option<f64>, usize)> = candidates.par_iter().map(|&h| cv_value(pts, h)).collect();
    let mut chosen: Option<(f64, f64)> = None;
    for (&h, (cv, _)) in candidates.iter().zip(&evals) {
        if let Some(v) = *cv {
            if chosen.is_none_or(|(_, best)| v < best) {
                chosen = Some((h, v));
            }
        }
    }
    let (chosen, _) = chosen.ok_or(BandwidthError::NoUsablePoints)?;
    Ok(CvProfile {
        outcome: outcome.to_string(),
        candidates: candidates.to_vec(),
        cv_values: evals.iter().map(|e| e.0).collect(),
        n_used: evals.iter().map(|e| e.1).collect(),
        chosen,
    })
}

pub fn cross_validate(
    panels: &[CoursePanel],
    forcing: &Forcing,
    outcome: &str,
    values: &OutcomeMap,
    candidates: &[f64],
) -> Result<CvProfile, BandwidthError> {
    cross_validate_points(outcome, &cv_points(panels, forcing, values), candidates)
}

/// Half-unit steps from 0.5 up to the 95th percentile of `|relative score|`.
pub fn default_grid(relative: &[f64]) -> Vec<f64> {
    let mut abs: Vec<f64> = relative.iter().map(|x| x.abs()).collect();
    if abs.is_empty() {
        return vec![0.5];
    }
    abs.sort_by(f64::total_cmp);
    let rank = ((0.95 * abs.len() as f64).ceil() as usize).clamp(1, abs.len());
    let p95 = abs[rank - 1];
    let steps = ((p95 / 0.5).floor() as usize).max(1);
    (1..=steps).map(|k| k as f64 * 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_linear_has_zero_error() {
        let pts: Vec<(f64, f64)> =
            (-10..10).map(|i| i as f64).map(|x| (x, if x < 0.0 { 1.0 + 0.5 * x } else { 4.0 - 2.0 * x })).collect();
        let prof = cross_validate_points("y", &pts, &[2.0, 3.0, 5.0]).unwrap();
        assert_eq!(prof.cv_values[0], None);
        for cv in &prof.cv_values[1..] {
            assert!(cv.unwrap().abs() < 1e-20);
        }
        assert_eq!(prof.chosen, 3.0);
    }

    #[test]
    fn infeasible_bandwidth_is_skipped() {
        let pts: Vec<(f64, f64)> = (-5..5).map(|i| (i as f64, (i * i) as f64)).collect();
        let prof = cross_validate_points("y", &pts, &[1.0, 4.0]).unwrap();
        assert_eq!(prof.cv_values[0], None);
        assert_eq!(prof.chosen, 4.0);
        assert!(matches!(cross_validate_points("y", &pts, &[1.0]), Err(BandwidthError::NoUsablePoints)));
    }

    #[test]
    fn grid_shape() {
        let rel: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let g = default_grid(&rel);
        assert_eq!(g.first(), Some(&0.5));
        assert_eq!(g.last(), Some(&9.0));
    }
}
