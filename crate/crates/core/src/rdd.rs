//! Local linear fuzzy regression-discontinuity estimators.
//!
//! All estimators use a uniform kernel on `|relative score| <= bandwidth`,
//! cluster by course, and include the absolute score as a control. With
//! `r` the relative score, `T` assignment and `D` training:
//!
//! * LATE: 2SLS of Y on `D, D*r` (instrumented by `T, T*r`) and `1, score, r`.
//! * ITT: OLS of Y on `1, T, score, r, T*r`.
//! * HLATE: 2SLS of Y on `D, H*D` (instrumented by `T, H*T`) and
//!   `1, H, score, r, T*r`; the heterogeneous ITT replaces `D` by `T`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{difference_outcome, ApplicantId, CoursePanel, DatasetError, OutcomeSpec, Token, Trade};
use crate::regression::{self, design, RegressionError};
use crate::threshold::{Forcing, ScoreSource};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RddError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("no usable records on both sides of the cutoff within bandwidth {0}")]
    EmptyBandwidthSample(f64),
    #[error("subgroup {0} is empty on one side of the cutoff")]
    SubgroupDegenerate(String),
    #[error("forcing variable uses the {found} score but the specification asks for {wanted}")]
    ScoreSourceMismatch { wanted: &'static str, found: &'static str },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    Late,
    Itt,
    HlateByGroup,
    /// Heterogeneous ITT: the subgroup-interacted reduced form.
    HittByGroup,
}

impl Estimator {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "late" => Some(Estimator::Late),
            "itt" => Some(Estimator::Itt),
            "hlate" | "hlate_by_group" => Some(Estimator::HlateByGroup),
            "hitt" | "hitt_by_group" => Some(Estimator::HittByGroup),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Late => "late",
            Estimator::Itt => "itt",
            Estimator::HlateByGroup => "hlate",
            Estimator::HittByGroup => "hitt",
        }
    }

    pub fn is_heterogeneous(self) -> bool {
        matches!(self, Estimator::HlateByGroup | Estimator::HittByGroup)
    }
}

/// Binary subgroup indicator H.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subgroup {
    Female,
    /// One trade against all others.
    Trade(Trade),
}

impl Subgroup {
    /// `female` (or `gender`), or `trade:<token>`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "female" | "gender" => Some(Subgroup::Female),
            other => other.strip_prefix("trade:").and_then(Trade::parse_token).map(Subgroup::Trade),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Subgroup::Female => "female".into(),
            Subgroup::Trade(t) => format!("trade:{t}"),
        }
    }

    fn indicator(&self, panel: &CoursePanel, female: Option<bool>) -> Option<bool> {
        match self {
            Subgroup::Female => female,
            Subgroup::Trade(t) => Some(panel.trade == *t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RddSpec {
    pub outcome: OutcomeSpec,
    pub bandwidth: f64,
    pub score_source: ScoreSource,
    pub estimator: Estimator,
    pub subgroup: Option<Subgroup>,
}

impl RddSpec {
    pub fn new(outcome: OutcomeSpec, bandwidth: f64, score_source: ScoreSource, estimator: Estimator) -> Self {
        RddSpec { outcome, bandwidth, score_source, estimator, subgroup: None }
    }

    pub fn with_subgroup(mut self, g: Subgroup) -> Self {
        self.subgroup = Some(g);
        self
    }

    fn validate(&self, forcing: &Forcing) -> Result<(), RddError> {
        if !(self.bandwidth > 0.0) {
            return Err(RddError::InvalidSpec(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if self.estimator.is_heterogeneous() != self.subgroup.is_some() {
            return Err(RddError::InvalidSpec("a subgroup is required exactly for heterogeneous estimators".into()));
        }
        if forcing.source != self.score_source {
            return Err(RddError::ScoreSourceMismatch {
                wanted: self.score_source.as_str(),
                found: forcing.source.as_str(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Effect {
    pub effect: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupEffects {
    pub label: String,
    /// Effect where the indicator is 0.
    pub rest: Effect,
    /// Effect where the indicator is 1.
    pub group: Effect,
    /// `group - rest`, the interaction coefficient.
    pub difference: Effect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub estimator: String,
    pub outcome: String,
    pub effect: f64,
    pub se: f64,
    pub first_stage_coef: Option<f64>,
    pub f_stat: Option<f64>,
    pub n: usize,
    pub n_clusters: usize,
    pub bandwidth: Option<f64>,
    pub baseline_mean: f64,
    /// For heterogeneous estimators `effect`/`se` repeat `difference`.
    pub subgroup_effects: Option<SubgroupEffects>,
    pub warnings: Vec<String>,
}

impl EstimateResult {
    pub fn t_stat(&self) -> f64 {
        if self.se > 0.0 {
            self.effect / self.se
        } else {
            0.0
        }
    }
}

/// Outcome and baseline value per applicant.
pub type OutcomeMap = HashMap<ApplicantId, (f64, f64)>;

/// Outcome values for a spec, paired with the outcome's baseline.
pub fn outcome_map(panels: &[CoursePanel], spec: &OutcomeSpec) -> Result<OutcomeMap, RddError> {
    let values = difference_outcome(panels, spec)?;
    let baselines: HashMap<ApplicantId, f64> = panels
        .iter()
        .flat_map(|p| &p.records)
        .filter_map(|r| r.outcomes.get(&spec.name).map(|o| (r.applicant_id, o.baseline)))
        .collect();
    Ok(values.into_iter().map(|(id, v)| (id, (v, baselines[&id]))).collect())
}

struct Sample {
    y: Vec<f64>,
    d: Vec<f64>,
    t: Vec<f64>,
    score: Vec<f64>,
    rel: Vec<f64>,
    h: Vec<f64>,
    cluster: Vec<i64>,
    baseline: Vec<f64>,
}

impl Sample {
    fn len(&self) -> usize {
        self.y.len()
    }

    fn baseline_mean(&self) -> f64 {
        self.baseline.iter().sum::<f64>() / self.len() as f64
    }
}

fn build_sample(
    panels: &[CoursePanel],
    forcing: &Forcing,
    values: &OutcomeMap,
    bandwidth: f64,
    subgroup: Option<Subgroup>,
) -> Sample {
    let mut s = Sample {
        y: vec![],
        d: vec![],
        t: vec![],
        score: vec![],
        rel: vec![],
        h: vec![],
        cluster: vec![],
        baseline: vec![],
    };
    for p in panels {
        for r in &p.records {
            let Some(pt) = forcing.get(r.applicant_id) else { continue };
            let Some(&(y, base)) = values.get(&r.applicant_id) else { continue };
            if pt.relative.abs() > bandwidth {
                continue;
            }
            let h = match subgroup {
                Some(g) => match g.indicator(p, r.is_female()) {
                    Some(h) => h,
                    None => continue,
                },
                None => false,
            };
            s.y.push(y);
            s.d.push(if r.treated { 1.0 } else { 0.0 });
            s.t.push(if pt.assigned { 1.0 } else { 0.0 });
            s.score.push(pt.score);
            s.rel.push(pt.relative);
            s.h.push(if h { 1.0 } else { 0.0 });
            s.cluster.push(p.course_id);
            s.baseline.push(base);
        }
    }
    s
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Dispatches on `spec.estimator` for outcome values read from the panels.
pub fn estimate(panels: &[CoursePanel], forcing: &Forcing, spec: &RddSpec) -> Result<EstimateResult, RddError> {
    spec.validate(forcing)?;
    let values = outcome_map(panels, &spec.outcome)?;
    estimate_with_values(panels, forcing, &values, spec)
}

pub fn estimate_late(panels: &[CoursePanel], forcing: &Forcing, spec: &RddSpec) -> Result<EstimateResult, RddError> {
    estimate(panels, forcing, &RddSpec { estimator: Estimator::Late, ..spec.clone() })
}

pub fn estimate_itt(panels: &[CoursePanel], forcing: &Forcing, spec: &RddSpec) -> Result<EstimateResult, RddError> {
    estimate(panels, forcing, &RddSpec { estimator: Estimator::Itt, ..spec.clone() })
}

pub fn estimate_hlate(panels: &[CoursePanel], forcing: &Forcing, spec: &RddSpec) -> Result<EstimateResult, RddError> {
    let est = if spec.estimator == Estimator::HittByGroup { Estimator::HittByGroup } else { Estimator::HlateByGroup };
    estimate(panels, forcing, &RddSpec { estimator: est, ..spec.clone() })
}

/// Runs the estimator on caller-supplied outcome values; the outcome name in
/// `spec` is used only for labelling.
pub fn estimate_with_values(
    panels: &[CoursePanel],
    forcing: &Forcing,
    values: &OutcomeMap,
    spec: &RddSpec,
) -> Result<EstimateResult, RddError> {
    spec.validate(forcing)?;
    let s = build_sample(panels, forcing, values, spec.bandwidth, spec.subgroup);
    let n_assigned = s.t.iter().filter(|&&t| t == 1.0).count();
    if n_assigned == 0 || n_assigned == s.len() {
        return Err(RddError::EmptyBandwidthSample(spec.bandwidth));
    }
    let mut res = match spec.estimator {
        Estimator::Late => late(&s)?,
        Estimator::Itt => itt(&s)?,
        Estimator::HlateByGroup | Estimator::HittByGroup => {
            let g = spec.subgroup.expect("validated");
            for h in [0.0, 1.0] {
                for t in [0.0, 1.0] {
                    if !s.h.iter().zip(&s.t).any(|(&hi, &ti)| hi == h && ti == t) {
                        return Err(RddError::SubgroupDegenerate(g.label()));
                    }
                }
            }
            hetero(&s, &g.label(), spec.estimator == Estimator::HlateByGroup)?
        }
    };
    res.estimator = spec.estimator.as_str().to_string();
    res.outcome = spec.outcome.name.clone();
    res.bandwidth = Some(spec.bandwidth);
    res.baseline_mean = s.baseline_mean();
    Ok(res)
}

fn blank(effect: f64, se: f64, n: usize, n_clusters: usize) -> EstimateResult {
    EstimateResult {
        estimator: String::new(),
        outcome: String::new(),
        effect,
        se,
        first_stage_coef: None,
        f_stat: None,
        n,
        n_clusters,
        bandwidth: None,
        baseline_mean: 0.0,
        subgroup_effects: None,
        warnings: Vec::new(),
    }
}

fn weak_warning(f: f64) -> String {
    format!("weak instruments: first-stage F = {f:.3} < {}", regression::WEAK_INSTRUMENT_F)
}

fn late(s: &Sample) -> Result<EstimateResult, RddError> {
    let n = s.len();
    let endog = design(&[s.d.clone(), mul(&s.d, &s.rel)]);
    let inst = design(&[s.t.clone(), mul(&s.t, &s.rel)]);
    let exog = design(&[vec![1.0; n], s.score.clone(), s.rel.clone()]);
    let fit = regression::tsls(&s.y, &endog, &inst, &exog, &s.cluster)?;
    let ss = &fit.second_stage;
    let mut res = blank(ss.coef(0).unwrap(), ss.se(0).unwrap(), n, ss.n_clusters);
    res.first_stage_coef = fit.first_stage_coef(0, 0);
    res.f_stat = Some(fit.f_excluded);
    if fit.weak_instruments {
        res.warnings.push(weak_warning(fit.f_excluded));
    }
    Ok(res)
}

fn itt(s: &Sample) -> Result<EstimateResult, RddError> {
    let n = s.len();
    let x = design(&[vec![1.0; n], s.t.clone(), s.score.clone(), s.rel.clone(), mul(&s.t, &s.rel)]);
    let fit = regression::ols(&x, &s.y, None, &s.cluster)?;
    let coef = fit.coef(1).ok_or_else(|| RddError::InvalidSpec("assignment collinear with controls".into()))?;
    Ok(blank(coef, fit.se(1).unwrap(), n, fit.n_clusters))
}

fn hetero(s: &Sample, label: &str, instrumented: bool) -> Result<EstimateResult, RddError> {
    let n = s.len();
    let exog_cols = vec![vec![1.0; n], s.h.clone(), s.score.clone(), s.rel.clone(), mul(&s.t, &s.rel)];
    let (b0, b1, v00, v11, v01, n_clusters, first_stage, f) = if instrumented {
        let endog = design(&[s.d.clone(), mul(&s.h, &s.d)]);
        let inst = design(&[s.t.clone(), mul(&s.h, &s.t)]);
        let fit = regression::tsls(&s.y, &endog, &inst, &design(&exog_cols), &s.cluster)?;
        let ss = &fit.second_stage;
        let f = if fit.weak_instruments { Some(fit.f_excluded) } else { None };
        (
            ss.coef(0).unwrap(),
            ss.coef(1).unwrap(),
            ss.cov(0, 0).unwrap(),
            ss.cov(1, 1).unwrap(),
            ss.cov(0, 1).unwrap(),
            ss.n_clusters,
            Some((fit.first_stage_coef(0, 0), fit.f_excluded)),
            f,
        )
    } else {
        let mut cols = vec![s.t.clone(), mul(&s.h, &s.t)];
        cols.extend(exog_cols);
        let x: DMatrix<f64> = design(&cols);
        let fit = regression::ols(&x, &s.y, None, &s.cluster)?;
        let missing = || RddError::InvalidSpec("assignment terms collinear with controls".into());
        (
            fit.coef(0).ok_or_else(missing)?,
            fit.coef(1).ok_or_else(missing)?,
            fit.cov(0, 0).unwrap(),
            fit.cov(1, 1).unwrap(),
            fit.cov(0, 1).unwrap(),
            fit.n_clusters,
            None,
            None,
        )
    };
    let rest = Effect { effect: b0, se: v00.max(0.0).sqrt() };
    let difference = Effect { effect: b1, se: v11.max(0.0).sqrt() };
    let group = Effect { effect: b0 + b1, se: (v00 + v11 + 2.0 * v01).max(0.0).sqrt() };
    let mut res = blank(difference.effect, difference.se, n, n_clusters);
    if let Some((fs, fstat)) = first_stage {
        res.first_stage_coef = fs;
        res.f_stat = Some(fstat);
    }
    if let Some(f) = f {
        res.warnings.push(weak_warning(f));
    }
    res.subgroup_effects = Some(SubgroupEffects { label: label.to_string(), rest, group, difference });
    Ok(res)
}

/// One estimate per bandwidth, in input order. Failures are kept per row.
pub fn bandwidth_sweep(
    panels: &[CoursePanel],
    forcing: &Forcing,
    spec: &RddSpec,
    bandwidths: &[f64],
) -> Result<Vec<(f64, Result<EstimateResult, RddError>)>, RddError> {
    if bandwidths.is_empty() {
        return Err(RddError::InvalidSpec("bandwidth list is empty".into()));
    }
    let values = outcome_map(panels, &spec.outcome)?;
    Ok(bandwidths
        .par_iter()
        .map(|&h| {
            let s = RddSpec { bandwidth: h, ..spec.clone() };
            (h, estimate_with_values(panels, forcing, &values, &s))
        })
        .collect())
}
