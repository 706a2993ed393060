//! Propensity-score difference-in-differences: logit propensity model,
//! inverse-propensity weighted DID, and nearest-neighbour matching DID.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::covariates::{covariate_columns, fixed_effect_columns, Covariate, FixedEffect};
use crate::dataset::{difference_outcome, ApplicantId, ApplicantRecord, CourseId, CoursePanel, DatasetError, OutcomeSpec};
use crate::rdd::EstimateResult;
use crate::regression::{self, design, LogitFit, RegressionError};
use crate::threshold::Forcing;

pub const DEFAULT_TRIM: (f64, f64) = (0.01, 0.99);
pub const DEFAULT_NEIGHBOURS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsmError {
    #[error("no treated or no control records remain on the common support")]
    EmptySupport,
    #[error("need at least {needed} controls on support, found {found}")]
    InsufficientControls { needed: usize, found: usize },
    #[error("assignment indicator requested without a forcing variable")]
    MissingForcing,
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
}

/// Which binary indicator the propensity model explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TreatmentIndicator {
    /// Above the course threshold.
    Assigned,
    /// Took the training.
    #[default]
    Trained,
}

impl TreatmentIndicator {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "assigned" => Some(TreatmentIndicator::Assigned),
            "trained" => Some(TreatmentIndicator::Trained),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensitySpec {
    pub covariates: Vec<Covariate>,
    pub fixed_effects: Vec<FixedEffect>,
    pub treatment: TreatmentIndicator,
    pub trim: (f64, f64),
}

impl PropensitySpec {
    pub fn new(covariates: Vec<Covariate>) -> Self {
        PropensitySpec {
            covariates,
            fixed_effects: Vec::new(),
            treatment: TreatmentIndicator::Trained,
            trim: DEFAULT_TRIM,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub scores: BTreeMap<ApplicantId, f64>,
    pub treated: BTreeMap<ApplicantId, bool>,
    pub clusters: BTreeMap<ApplicantId, CourseId>,
    /// True where the score lies within the trim bounds.
    pub support_mask: BTreeMap<ApplicantId, bool>,
    pub model: Option<LogitFit>,
    /// Logit column names, aligned with the model's design columns.
    pub columns: Vec<String>,
    pub trim: (f64, f64),
}

impl PropensityFit {
    /// Wraps externally supplied scores; `support_mask` follows `trim`.
    pub fn from_scores(
        scores: BTreeMap<ApplicantId, f64>,
        treated: BTreeMap<ApplicantId, bool>,
        clusters: BTreeMap<ApplicantId, CourseId>,
        trim: (f64, f64),
    ) -> Self {
        let support_mask = scores.iter().map(|(&id, &p)| (id, p >= trim.0 && p <= trim.1 && p > 0.0 && p < 1.0)).collect();
        PropensityFit { scores, treated, clusters, support_mask, model: None, columns: Vec::new(), trim }
    }

    pub fn pseudo_r_squared(&self) -> Option<f64> {
        self.model.as_ref().map(LogitFit::pseudo_r_squared)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        let j = self.columns.iter().position(|c| c == name)?;
        self.model.as_ref()?.fit.coef(j)
    }

    fn on_support(&self, id: ApplicantId) -> Option<(f64, bool, CourseId)> {
        if !*self.support_mask.get(&id)? {
            return None;
        }
        Some((self.scores[&id], self.treated[&id], self.clusters[&id]))
    }
}

/// Logit propensity score for the chosen indicator on covariates (missing
/// values zero-filled and flagged) and fixed-effect dummies.
pub fn fit_propensity(
    panels: &[CoursePanel],
    forcing: Option<&Forcing>,
    spec: &PropensitySpec,
) -> Result<PropensityFit, PsmError> {
    if !(0.0..0.5).contains(&spec.trim.0) || !(0.5..=1.0).contains(&spec.trim.1) {
        return Err(PsmError::InvalidSettings(format!("trim bounds {:?}", spec.trim)));
    }
    let mut rows: Vec<(&CoursePanel, &ApplicantRecord)> = Vec::new();
    let mut d = Vec::new();
    for p in panels {
        for r in &p.records {
            let t = match spec.treatment {
                TreatmentIndicator::Trained => r.treated,
                TreatmentIndicator::Assigned => match forcing.ok_or(PsmError::MissingForcing)?.get(r.applicant_id) {
                    Some(pt) => pt.assigned,
                    None => continue,
                },
            };
            rows.push((p, r));
            d.push(if t { 1.0 } else { 0.0 });
        }
    }
    let n = rows.len();
    let mut columns = vec!["const".to_string()];
    let mut cols = vec![vec![1.0; n]];
    let cov = covariate_columns(&rows, &spec.covariates);
    columns.extend(cov.names);
    cols.extend(cov.values);
    let fe = fixed_effect_columns(&rows, &spec.fixed_effects);
    columns.extend(fe.names);
    cols.extend(fe.values);
    let clusters: Vec<CourseId> = rows.iter().map(|(p, _)| p.course_id).collect();
    let model = regression::logit(&design(&cols), &d, &clusters)?;

    let ids: Vec<ApplicantId> = rows.iter().map(|(_, r)| r.applicant_id).collect();
    let scores = ids.iter().copied().zip(model.fit.fitted.iter().copied()).collect();
    let treated = ids.iter().copied().zip(d.iter().map(|&v| v == 1.0)).collect();
    let cl = ids.iter().copied().zip(clusters).collect();
    let mut fit = PropensityFit::from_scores(scores, treated, cl, spec.trim);
    fit.model = Some(model);
    fit.columns = columns;
    Ok(fit)
}

struct DidSample {
    ids: Vec<ApplicantId>,
    dy: Vec<f64>,
    pscore: Vec<f64>,
    treated: Vec<bool>,
    clusters: Vec<CourseId>,
    baseline: Vec<f64>,
}

fn did_sample(panels: &[CoursePanel], outcome: &OutcomeSpec, prop: &PropensityFit) -> Result<DidSample, PsmError> {
    let values = difference_outcome(panels, outcome)?;
    let baselines: HashMap<ApplicantId, f64> = panels
        .iter()
        .flat_map(|p| &p.records)
        .filter_map(|r| Some((r.applicant_id, r.outcomes.get(&outcome.name)?.baseline)))
        .collect();
    let mut s = DidSample { ids: vec![], dy: vec![], pscore: vec![], treated: vec![], clusters: vec![], baseline: vec![] };
    for (id, v) in values {
        let Some((p, t, c)) = prop.on_support(id) else { continue };
        s.ids.push(id);
        s.dy.push(v);
        s.pscore.push(p);
        s.treated.push(t);
        s.clusters.push(c);
        s.baseline.push(baselines[&id]);
    }
    let nt = s.treated.iter().filter(|&&t| t).count();
    if nt == 0 || nt == s.ids.len() {
        return Err(PsmError::EmptySupport);
    }
    Ok(s)
}

fn result(estimator: &str, outcome: &str, effect: f64, se: f64, n: usize, n_clusters: usize, baseline: &[f64]) -> EstimateResult {
    EstimateResult {
        estimator: estimator.to_string(),
        outcome: outcome.to_string(),
        effect,
        se,
        first_stage_coef: None,
        f_stat: None,
        n,
        n_clusters,
        bandwidth: None,
        baseline_mean: baseline.iter().sum::<f64>() / baseline.len().max(1) as f64,
        subgroup_effects: None,
        warnings: Vec::new(),
    }
}

fn did_regression(s: &DidSample, weights: Option<&[f64]>) -> Result<(f64, f64, usize), PsmError> {
    let n = s.ids.len();
    let t: Vec<f64> = s.treated.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let fit = regression::ols(&design(&[vec![1.0; n], t]), &s.dy, weights, &s.clusters)?;
    Ok((fit.coef(1).unwrap_or(0.0), fit.se(1).unwrap_or(0.0), fit.n_clusters))
}

/// Inverse-propensity weighted DID on the common support.
pub fn ipsw_did(panels: &[CoursePanel], outcome: &OutcomeSpec, prop: &PropensityFit) -> Result<EstimateResult, PsmError> {
    let s = did_sample(panels, outcome, prop)?;
    let w: Vec<f64> = s.pscore.iter().zip(&s.treated).map(|(&p, &t)| if t { 1.0 / p } else { 1.0 / (1.0 - p) }).collect();
    let (b, se, g) = did_regression(&s, Some(&w))?;
    Ok(result("ipsw_did", &outcome.name, b, se, s.ids.len(), g, &s.baseline))
}

/// Unweighted DID on the same sample as `ipsw_did`.
pub fn naive_did(panels: &[CoursePanel], outcome: &OutcomeSpec, prop: &PropensityFit) -> Result<EstimateResult, PsmError> {
    let s = did_sample(panels, outcome, prop)?;
    let (b, se, g) = did_regression(&s, None)?;
    Ok(result("naive_did", &outcome.name, b, se, s.ids.len(), g, &s.baseline))
}

/// Matched controls per treated record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    /// Treated id → `(control id, weight, |score gap|)`.
    pub matches: BTreeMap<ApplicantId, Vec<(ApplicantId, f64, f64)>>,
}

impl MatchSet {
    pub fn write_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["treated_id", "control_id", "weight", "score_gap"])?;
        for (t, list) in &self.matches {
            for (c, wt, gap) in list {
                w.write_record([t.to_string(), c.to_string(), wt.to_string(), gap.to_string()])?;
            }
        }
        w.flush()
    }
}

/// The `k` controls closest in score to `p`, plus any tied with the k-th.
/// `controls` is sorted by score.
pub fn nearest_controls(p: f64, controls: &[(f64, ApplicantId)], k: usize) -> Vec<(usize, f64)> {
    let pos = controls.partition_point(|c| c.0 < p);
    let (mut l, mut r) = (pos, pos);
    let mut picked: Vec<(usize, f64)> = Vec::new();
    loop {
        let left = (l > 0).then(|| (l - 1, (p - controls[l - 1].0).abs()));
        let right = (r < controls.len()).then(|| (r, (controls[r].0 - p).abs()));
        let next = match (left, right) {
            (Some(a), Some(b)) => {
                if a.1 <= b.1 {
                    a
                } else {
                    b
                }
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => break,
        };
        if picked.len() >= k && next.1 > picked[picked.len() - 1].1 {
            break;
        }
        if next.0 < l {
            l -= 1;
        } else {
            r += 1;
        }
        picked.push(next);
    }
    picked
}

/// Nearest-neighbour matching DID with replacement. The standard error is
/// the standard deviation of the matched differences over `sqrt(N_T)` and
/// ignores the matching step.
pub fn nn_did(
    panels: &[CoursePanel],
    outcome: &OutcomeSpec,
    prop: &PropensityFit,
    k: usize,
) -> Result<(EstimateResult, MatchSet), PsmError> {
    if k == 0 {
        return Err(PsmError::InvalidSettings("k must be at least 1".into()));
    }
    let s = did_sample(panels, outcome, prop)?;
    let mut controls: Vec<(f64, ApplicantId)> = Vec::new();
    let mut dy_by_id: HashMap<ApplicantId, f64> = HashMap::new();
    for i in 0..s.ids.len() {
        dy_by_id.insert(s.ids[i], s.dy[i]);
        if !s.treated[i] {
            controls.push((s.pscore[i], s.ids[i]));
        }
    }
    if controls.len() < k {
        return Err(PsmError::InsufficientControls { needed: k, found: controls.len() });
    }
    controls.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let treated: Vec<usize> = (0..s.ids.len()).filter(|&i| s.treated[i]).collect();
    let per_treated: Vec<(ApplicantId, f64, Vec<(ApplicantId, f64, f64)>)> = treated
        .par_iter()
        .map(|&i| {
            let near = nearest_controls(s.pscore[i], &controls, k);
            let w = 1.0 / near.len() as f64;
            let mut list: Vec<(ApplicantId, f64, f64)> = near.iter().map(|&(j, gap)| (controls[j].1, w, gap)).collect();
            list.sort_by_key(|m| m.0);
            let counterfactual: f64 = list.iter().map(|m| m.1 * dy_by_id[&m.0]).sum();
            (s.ids[i], s.dy[i] - counterfactual, list)
        })
        .collect();

    let nt = per_treated.len();
    let diffs: Vec<f64> = per_treated.iter().map(|x| x.1).collect();
    let effect = diffs.iter().sum::<f64>() / nt as f64;
    let se = if nt > 1 {
        let var = diffs.iter().map(|d| (d - effect).powi(2)).sum::<f64>() / (nt - 1) as f64;
        (var / nt as f64).sqrt()
    } else {
        0.0
    };
    let matches = MatchSet { matches: per_treated.into_iter().map(|(id, _, list)| (id, list)).collect() };
    let treated_baseline: Vec<f64> = treated.iter().map(|&i| s.baseline[i]).collect();
    let mut res = result("nn_did", &outcome.name, effect, se, s.ids.len(), 0, &treated_baseline);
    res.warnings.push("matching standard error is approximate".into());
    Ok((res, matches))
}
