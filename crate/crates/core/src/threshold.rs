//! Per-course threshold simulation on the reconstructed score and the
//! resulting forcing variable.
//!
//! For every candidate cutoff (each distinct reconstructed score in the
//! course) treatment is regressed on an intercept and the assignment dummy;
//! the candidate with the largest R² wins, ties going to the smallest.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{ApplicantId, CourseId, CoursePanel};
use crate::scoring::ScoreTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThresholdError {
    #[error("course {0}: treatment does not vary, no threshold can be simulated")]
    DegenerateCourse(CourseId),
    #[error("course {0} has fewer than two records")]
    TooFewRecords(CourseId),
    #[error("no reconstructed score for applicant {0}")]
    MissingScore(ApplicantId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub course_id: CourseId,
    pub sim_threshold: f64,
    pub best_r2: f64,
    /// `(candidate, R²)` in ascending candidate order.
    pub r2_profile: Vec<(f64, f64)>,
    pub assignment: BTreeMap<ApplicantId, bool>,
    pub relative_score: BTreeMap<ApplicantId, f64>,
}

impl ThresholdResult {
    pub fn n_above(&self) -> usize {
        self.assignment.values().filter(|&&t| t).count()
    }

    pub fn n_below(&self) -> usize {
        self.assignment.len() - self.n_above()
    }
}

/// R² of a binary outcome regressed on an intercept and a binary regressor,
/// from counts: `n` records, `a` with the regressor set, `b` with the
/// outcome set, `c` with both. Zero when either variable is constant.
pub fn binary_r2(n: u64, a: u64, b: u64, c: u64) -> f64 {
    if a == 0 || a == n || b == 0 || b == n {
        return 0.0;
    }
    let cov = n as f64 * c as f64 - a as f64 * b as f64;
    let denom = a as f64 * (n - a) as f64 * b as f64 * (n - b) as f64;
    cov * cov / denom
}

pub fn simulate_threshold(panel: &CoursePanel, scores: &ScoreTable) -> Result<ThresholdResult, ThresholdError> {
    let n = panel.records.len();
    if n < 2 {
        return Err(ThresholdError::TooFewRecords(panel.course_id));
    }
    let mut pts: Vec<(f64, bool, ApplicantId)> = Vec::with_capacity(n);
    for r in &panel.records {
        let s = scores.recon_total(r.applicant_id).ok_or(ThresholdError::MissingScore(r.applicant_id))?;
        pts.push((s, r.treated, r.applicant_id));
    }
    let treated = pts.iter().filter(|p| p.1).count() as u64;
    if treated == 0 || treated == n as u64 {
        return Err(ThresholdError::DegenerateCourse(panel.course_id));
    }

    let mut candidates: Vec<f64> = pts.iter().map(|p| p.0).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut r2_profile = Vec::with_capacity(candidates.len());
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for &tau in &candidates {
        let above = pts.iter().filter(|p| p.0 >= tau);
        let (a, c) = above.fold((0u64, 0u64), |(a, c), p| (a + 1, c + p.1 as u64));
        let r2 = binary_r2(n as u64, a, treated, c);
        r2_profile.push((tau, r2));
        if r2 > best.1 {
            best = (tau, r2);
        }
    }
    let (tau, best_r2) = best;
    let assignment = pts.iter().map(|p| (p.2, p.0 >= tau)).collect();
    let relative_score = pts.iter().map(|p| (p.2, p.0 - tau)).collect();
    Ok(ThresholdResult { course_id: panel.course_id, sim_threshold: tau, best_r2, r2_profile, assignment, relative_score })
}

/// Simulated thresholds for every course, in panel order, with degenerate
/// courses reported separately.
#[derive(Debug, Clone, Default)]
pub struct ThresholdRun {
    pub results: Vec<ThresholdResult>,
    pub failed: Vec<(CourseId, ThresholdError)>,
}

pub fn simulate_all(panels: &[CoursePanel], scores: &ScoreTable) -> ThresholdRun {
    let outcomes: Vec<_> = panels.par_iter().map(|p| (p.course_id, simulate_threshold(p, scores))).collect();
    let mut run = ThresholdRun::default();
    for (c, res) in outcomes {
        match res {
            Ok(r) => run.results.push(r),
            Err(e) => run.failed.push((c, e)),
        }
    }
    run
}

/// Stores simulated thresholds on the panels they were computed from.
pub fn record_thresholds(panels: &mut [CoursePanel], run: &ThresholdRun) {
    let map: HashMap<CourseId, f64> = run.results.iter().map(|r| (r.course_id, r.sim_threshold)).collect();
    for p in panels {
        p.sim_threshold = map.get(&p.course_id).copied();
    }
}

pub fn write_threshold_csv<W: Write>(run: &ThresholdRun, sink: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["course_id", "sim_threshold", "best_r2", "n_above", "n_below"])?;
    for r in &run.results {
        w.write_record([
            r.course_id.to_string(),
            r.sim_threshold.to_string(),
            r.best_r2.to_string(),
            r.n_above().to_string(),
            r.n_below().to_string(),
        ])?;
    }
    w.flush()
}

/// Which score defines the running variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScoreSource {
    Original,
    #[default]
    Reconstructed,
}

impl ScoreSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "original" => Some(ScoreSource::Original),
            "reconstructed" => Some(ScoreSource::Reconstructed),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreSource::Original => "original",
            ScoreSource::Reconstructed => "reconstructed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcingPoint {
    /// Score on its own scale.
    pub score: f64,
    /// Score minus the course threshold.
    pub relative: f64,
    pub assigned: bool,
}

/// Running variable and assignment for every record of the usable courses.
#[derive(Debug, Clone)]
pub struct Forcing {
    pub source: ScoreSource,
    points: HashMap<ApplicantId, ForcingPoint>,
    pub thresholds: BTreeMap<CourseId, f64>,
    /// Courses without a usable threshold, left out of estimation.
    pub excluded: Vec<(CourseId, ThresholdError)>,
}

impl Forcing {
    /// Original totals against the seats-derived original thresholds.
    pub fn original(panels: &[CoursePanel]) -> Self {
        let mut points = HashMap::new();
        let mut thresholds = BTreeMap::new();
        for p in panels {
            let t = p.orig_threshold as f64;
            thresholds.insert(p.course_id, t);
            for r in &p.records {
                let score = r.orig_total() as f64;
                points.insert(r.applicant_id, ForcingPoint { score, relative: score - t, assigned: score >= t });
            }
        }
        Forcing { source: ScoreSource::Original, points, thresholds, excluded: Vec::new() }
    }

    /// Reconstructed totals against simulated thresholds.
    pub fn reconstructed(panels: &[CoursePanel], scores: &ScoreTable) -> (Self, ThresholdRun) {
        let run = simulate_all(panels, scores);
        (Self::from_run(panels, scores, &run), run)
    }

    pub fn from_run(panels: &[CoursePanel], scores: &ScoreTable, run: &ThresholdRun) -> Self {
        let mut points = HashMap::new();
        let mut thresholds = BTreeMap::new();
        let by_course: HashMap<CourseId, &ThresholdResult> = run.results.iter().map(|r| (r.course_id, r)).collect();
        for p in panels {
            let Some(res) = by_course.get(&p.course_id) else { continue };
            thresholds.insert(p.course_id, res.sim_threshold);
            for r in &p.records {
                let score = scores.recon_total(r.applicant_id).expect("threshold run covered this record");
                points.insert(
                    r.applicant_id,
                    ForcingPoint { score, relative: score - res.sim_threshold, assigned: score >= res.sim_threshold },
                );
            }
        }
        Forcing { source: ScoreSource::Reconstructed, points, thresholds, excluded: run.failed.clone() }
    }

    pub fn get(&self, id: ApplicantId) -> Option<&ForcingPoint> {
        self.points.get(&id)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityBin {
    pub center: f64,
    pub mean_treated: f64,
    pub count: usize,
}

/// Share treated in bins of the relative score. Bins have an edge at zero;
/// empty bins are omitted.
pub fn pooled_first_stage_probability(panels: &[CoursePanel], forcing: &Forcing, bin_width: f64) -> Vec<ProbabilityBin> {
    let mut bins: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for r in panels.iter().flat_map(|p| &p.records) {
        let Some(pt) = forcing.get(r.applicant_id) else { continue };
        let idx = bin_index(pt.relative, bin_width);
        let e = bins.entry(idx).or_default();
        e.0 += 1;
        e.1 += r.treated as usize;
    }
    bins.into_iter()
        .map(|(idx, (count, treated))| ProbabilityBin {
            center: (idx as f64 + 0.5) * bin_width,
            mean_treated: treated as f64 / count as f64,
            count,
        })
        .collect()
}

/// Index of the half-open bin `[k w, (k+1) w)` holding `x`.
pub fn bin_index(x: f64, width: f64) -> i64 {
    (x / width).floor() as i64
}
