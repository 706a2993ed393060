//! Manipulation, balance, continuity and attrition checks.
//!
//! The density check is a two-sided histogram jump test: bin densities near
//! the cutoff are fitted by count-weighted lines on each side, and the
//! difference of the two intercepts at zero is compared with its standard
//! error. It automates the visual check and is not a local-likelihood
//! density estimator.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use thiserror::Error;

use crate::covariates::{covariate_columns, fixed_effect_columns, Covariate, FixedEffect};
use crate::dataset::{ApplicantRecord, CourseId, CoursePanel, OutcomeSpec, Wave};
use crate::rdd::{estimate_with_values, Effect, Estimator, OutcomeMap, RddError, RddSpec};
use crate::regression::{self, design, Covariance, FitResult, RegressionError};
use crate::threshold::{bin_index, Forcing, ScoreSource};

/// Bins on each side of the cutoff used by the density line fits.
pub const DENSITY_FIT_BINS: i64 = 10;

/// Two-sided normal critical values at the 1, 5 and 10 percent levels.
pub const CRITICAL_VALUES: [(f64, &str); 3] = [(2.576, "***"), (1.960, "**"), (1.645, "*")];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("fewer than 3 non-empty bins on the {0} side of the cutoff")]
    TooFewBins(&'static str),
    #[error("bin width must be positive, got {0}")]
    InvalidBinWidth(f64),
    #[error("no records to analyse")]
    EmptySample,
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Rdd(#[from] RddError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityBin {
    pub center: f64,
    pub count: usize,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    pub bin_width: f64,
    pub n: usize,
    /// Every bin between the lowest and highest occupied one.
    pub bins: Vec<DensityBin>,
    pub left_fit: LineFit,
    pub right_fit: LineFit,
    /// Right intercept minus left intercept.
    pub jump: f64,
    pub jump_se: f64,
}

impl DensityProfile {
    pub fn significant(&self) -> bool {
        self.jump > 2.0 * self.jump_se
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["center", "count", "density"])?;
        for b in &self.bins {
            w.write_record([b.center.to_string(), b.count.to_string(), b.density.to_string()])?;
        }
        w.flush()
    }
}

fn weighted_line(x: Vec<f64>, y: Vec<f64>, w: Vec<f64>) -> Result<LineFit, RegressionError> {
    let m = x.len();
    let fit = regression::ols_with(&design(&[vec![1.0; m], x]), &y, Some(&w), Covariance::Classical)?;
    Ok(LineFit {
        intercept: fit.coef(0).unwrap_or(0.0),
        slope: fit.coef(1).unwrap_or(0.0),
        intercept_se: fit.se(0).unwrap_or(0.0),
    })
}

/// Histogram jump test at zero.
pub fn density_test(relative: &[f64], bin_width: f64) -> Result<DensityProfile, DiagnosticsError> {
    if !(bin_width > 0.0) {
        return Err(DiagnosticsError::InvalidBinWidth(bin_width));
    }
    if relative.is_empty() {
        return Err(DiagnosticsError::EmptySample);
    }
    let n = relative.len();
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &x in relative {
        *counts.entry(bin_index(x, bin_width)).or_default() += 1;
    }
    let density = |c: usize| c as f64 / (n as f64 * bin_width);
    let lo = *counts.keys().next().unwrap();
    let hi = *counts.keys().next_back().unwrap();
    let bins = (lo..=hi)
        .map(|k| {
            let c = counts.get(&k).copied().unwrap_or(0);
            DensityBin { center: (k as f64 + 0.5) * bin_width, count: c, density: density(c) }
        })
        .collect();

    let side = |range: std::ops::Range<i64>, name: &'static str| -> Result<LineFit, DiagnosticsError> {
        let occupied: Vec<(i64, usize)> = range.filter_map(|k| counts.get(&k).map(|&c| (k, c))).collect();
        if occupied.len() < 3 {
            return Err(DiagnosticsError::TooFewBins(name));
        }
        let x = occupied.iter().map(|(k, _)| (*k as f64 + 0.5) * bin_width).collect();
        let y = occupied.iter().map(|(_, c)| density(*c)).collect();
        let w = occupied.iter().map(|(_, c)| *c as f64).collect();
        Ok(weighted_line(x, y, w)?)
    };
    let left_fit = side(-DENSITY_FIT_BINS..0, "left")?;
    let right_fit = side(0..DENSITY_FIT_BINS, "right")?;
    Ok(DensityProfile {
        bin_width,
        n,
        bins,
        left_fit,
        right_fit,
        jump: right_fit.intercept - left_fit.intercept,
        jump_se: (left_fit.intercept_se.powi(2) + right_fit.intercept_se.powi(2)).sqrt(),
    })
}

/// Relative scores for the density test. In each course one record sitting
/// exactly on the threshold is left out: the threshold is itself an order
/// statistic of the course's scores, so one record lands on it by
/// construction.
pub fn density_sample(panels: &[CoursePanel], forcing: &Forcing) -> Vec<f64> {
    let mut out = Vec::new();
    for p in panels {
        let mut skipped = false;
        for r in &p.records {
            let Some(pt) = forcing.get(r.applicant_id) else { continue };
            if pt.relative == 0.0 && !skipped {
                skipped = true;
                continue;
            }
            out.push(pt.relative);
        }
    }
    out
}

/// Significance stars against two-sided normal critical values.
pub fn stars(effect: f64, se: f64) -> &'static str {
    if !(se > 0.0) {
        return "";
    }
    let z = (effect / se).abs();
    CRITICAL_VALUES.iter().find(|(c, _)| z >= *c).map_or("", |(_, s)| s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub variable: String,
    pub late: Result<Effect, RddError>,
    pub itt: Result<Effect, RddError>,
}

impl BalanceRow {
    pub fn late_stars(&self) -> &'static str {
        self.late.as_ref().map_or("", |e| stars(e.effect, e.se))
    }

    pub fn itt_stars(&self) -> &'static str {
        self.itt.as_ref().map_or("", |e| stars(e.effect, e.se))
    }
}

pub fn covariate_values(panels: &[CoursePanel], covariate: &Covariate) -> OutcomeMap {
    panels
        .iter()
        .flat_map(|p| &p.records)
        .filter_map(|r| covariate.value(r).map(|v| (r.applicant_id, (v, v))))
        .collect()
}

/// LATE and ITT discontinuities in baseline covariates.
pub fn balance_table(
    panels: &[CoursePanel],
    forcing: &Forcing,
    covariates: &[Covariate],
    bandwidth: f64,
    score_source: ScoreSource,
) -> Vec<BalanceRow> {
    covariates
        .iter()
        .map(|c| {
            let values = covariate_values(panels, c);
            let spec = |estimator| RddSpec {
                outcome: OutcomeSpec::baseline(&c.to_string()),
                bandwidth,
                score_source,
                estimator,
                subgroup: None,
            };
            let run = |e| {
                estimate_with_values(panels, forcing, &values, &spec(e)).map(|r| Effect { effect: r.effect, se: r.se })
            };
            BalanceRow { variable: c.to_string(), late: run(Estimator::Late), itt: run(Estimator::Itt) }
        })
        .collect()
}

pub fn write_balance_csv<W: Write>(rows: &[BalanceRow], sink: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["variable", "late_coef", "late_se", "late_stars", "itt_coef", "itt_se", "itt_stars"])?;
    let cells = |e: &Result<Effect, RddError>| match e {
        Ok(e) => (e.effect.to_string(), e.se.to_string()),
        Err(_) => (String::new(), String::new()),
    };
    for r in rows {
        let (lc, ls) = cells(&r.late);
        let (ic, is) = cells(&r.itt);
        w.write_record([r.variable.clone(), lc, ls, r.late_stars().into(), ic, is, r.itt_stars().into()])?;
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityBin {
    pub center: f64,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityProfile {
    pub bins: Vec<ContinuityBin>,
    pub left_fit: Option<LineFit>,
    pub right_fit: Option<LineFit>,
    pub warnings: Vec<String>,
}

impl ContinuityProfile {
    /// Right intercept minus left intercept, when both sides were fitted.
    pub fn gap(&self) -> Option<f64> {
        Some(self.right_fit?.intercept - self.left_fit?.intercept)
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["center", "mean", "se", "n"])?;
        for b in &self.bins {
            w.write_record([b.center.to_string(), b.mean.to_string(), b.se.to_string(), b.n.to_string()])?;
        }
        w.flush()
    }
}

/// Binned means of a variable against the relative score within
/// `bandwidth`, with record-level line fits on each side.
pub fn continuity_bins(
    panels: &[CoursePanel],
    forcing: &Forcing,
    values: &OutcomeMap,
    bin_width: f64,
    bandwidth: f64,
) -> Result<ContinuityProfile, DiagnosticsError> {
    if !(bin_width > 0.0) {
        return Err(DiagnosticsError::InvalidBinWidth(bin_width));
    }
    let mut pts: Vec<(f64, f64)> = panels
        .iter()
        .flat_map(|p| &p.records)
        .filter_map(|r| Some((forcing.get(r.applicant_id)?.relative, values.get(&r.applicant_id)?.0)))
        .filter(|(x, _)| x.abs() <= bandwidth)
        .collect();
    // fixed summation order regardless of input order
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut grouped: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for &(x, y) in &pts {
        grouped.entry(bin_index(x, bin_width)).or_default().push(y);
    }
    let bins = grouped
        .into_iter()
        .map(|(k, ys)| {
            let n = ys.len();
            let mean = ys.iter().sum::<f64>() / n as f64;
            let se = if n > 1 {
                (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
            } else {
                0.0
            };
            ContinuityBin { center: (k as f64 + 0.5) * bin_width, mean, se, n }
        })
        .collect();

    let mut warnings = Vec::new();
    let mut fit_side = |name: &str, keep: &dyn Fn(f64) -> bool| {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().filter(|p| keep(p.0)).copied().unzip();
        let m = x.len();
        match weighted_line(x, y, vec![1.0; m]) {
            Ok(f) => Some(f),
            Err(e) => {
                warnings.push(format!("{name} side not fitted: {e}"));
                None
            }
        }
    };
    let left_fit = fit_side("left", &|x| x < 0.0);
    let right_fit = fit_side("right", &|x| x >= 0.0);
    Ok(ContinuityProfile { bins, left_fit, right_fit, warnings })
}

#[derive(Debug, Clone)]
pub struct AttritionFit {
    pub fit: FitResult,
    pub columns: Vec<String>,
}

impl AttritionFit {
    /// Coefficient on being above the threshold.
    pub fn assignment_effect(&self) -> Effect {
        Effect { effect: self.fit.coef(1).unwrap_or(0.0), se: self.fit.se(1).unwrap_or(0.0) }
    }

    pub fn coefficient(&self, name: &str) -> Option<Effect> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(Effect { effect: self.fit.coef(j)?, se: self.fit.se(j)? })
    }
}

/// Linear probability model of attrition on assignment, gender, their
/// interaction, controls with missing-value flags, and fixed effects.
pub fn attrition_regression(
    panels: &[CoursePanel],
    forcing: &Forcing,
    controls: &[Covariate],
    fixed_effects: &[FixedEffect],
    wave: Wave,
) -> Result<AttritionFit, DiagnosticsError> {
    let rows: Vec<(&CoursePanel, &ApplicantRecord)> = panels
        .iter()
        .flat_map(|p| p.records.iter().map(move |r| (p, r)))
        .filter(|(_, r)| forcing.get(r.applicant_id).is_some())
        .collect();
    if rows.is_empty() {
        return Err(DiagnosticsError::EmptySample);
    }
    let n = rows.len();
    let t: Vec<f64> = rows.iter().map(|(_, r)| if forcing.get(r.applicant_id).unwrap().assigned { 1.0 } else { 0.0 }).collect();
    let y: Vec<f64> = rows.iter().map(|(_, r)| if r.attrited(wave) { 1.0 } else { 0.0 }).collect();
    let clusters: Vec<CourseId> = rows.iter().map(|(p, _)| p.course_id).collect();

    let female = covariate_columns(&rows, &[Covariate::Female]);
    let female_t: Vec<f64> = female.values[0].iter().zip(&t).map(|(f, t)| f * t).collect();
    let mut names = vec!["const".to_string(), "above_threshold".to_string()];
    let mut cols = vec![vec![1.0; n], t];
    names.push("female".into());
    cols.push(female.values[0].clone());
    names.push("female_x_above".into());
    cols.push(female_t);
    names.extend(female.names.iter().skip(1).cloned());
    cols.extend(female.values.iter().skip(1).cloned());
    let rest: Vec<Covariate> = controls.iter().filter(|c| **c != Covariate::Female).cloned().collect();
    let ctrl = covariate_columns(&rows, &rest);
    names.extend(ctrl.names);
    cols.extend(ctrl.values);
    let fe = fixed_effect_columns(&rows, fixed_effects);
    names.extend(fe.names);
    cols.extend(fe.values);

    let fit = regression::ols(&design(&cols), &y, None, &clusters)?;
    Ok(AttritionFit { fit, columns: names })
}

/// Records and attriters by assignment status.
pub fn attrition_rates(panels: &[CoursePanel], forcing: &Forcing, wave: Wave) -> HashMap<bool, (usize, usize)> {
    let mut out: HashMap<bool, (usize, usize)> = HashMap::new();
    for r in panels.iter().flat_map(|p| &p.records) {
        let Some(pt) = forcing.get(r.applicant_id) else { continue };
        let e = out.entry(pt.assigned).or_default();
        e.0 += 1;
        e.1 += r.attrited(wave) as usize;
    }
    out
}
