//! Admission rubric and reconstruction of the five sub-scores on the 0-20
//! scale.
//!
//! Economic status, social status and district development are pure
//! functions of the application form. Technical education (s1) and the
//! interview score (s5) are recovered by regression on the original
//! sub-scores.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dataset::{
    ApplicantId, ApplicantRecord, Caste, CourseId, CoursePanel, FoodSufficiency, Gender, SpecialGroups,
};
use crate::regression::{self, RegressionError};

/// Per-capita monthly family income (NRs) below which an applicant counts
/// as poor on the economic row.
pub const INCOME_CUTOFF: f64 = 3000.0;
/// Records this close to their course's original threshold are left out of
/// the s1 regression.
pub const DONUT_HALF_WIDTH: i32 = 5;

const BUNDLED_DISTRICTS: &str = include_str!("../data/districts.csv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("unknown district {0:?}")]
    UnknownDistrict(String),
    #[error("applicant {applicant_id} has no {field}")]
    MissingField { applicant_id: ApplicantId, field: &'static str },
    #[error("too few records outside the donut to fit the s1 model (course {0:?})")]
    InsufficientDonutSample(Option<CourseId>),
    #[error("malformed table at line {line}: {detail}")]
    MalformedTable { line: u64, detail: String },
    #[error(transparent)]
    Regression(#[from] RegressionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Development {
    Developed,
    Moderate,
    Least,
}

impl Development {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "developed" => Some(Development::Developed),
            "moderately_developed" => Some(Development::Moderate),
            "least_developed" => Some(Development::Least),
            _ => None,
        }
    }
}

/// District development classification keyed by case-insensitive name.
#[derive(Debug, Clone)]
pub struct DistrictTable {
    map: HashMap<String, (String, Development)>,
}

impl DistrictTable {
    /// The 75-district table shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_DISTRICTS.as_bytes()).expect("bundled district table parses")
    }

    /// Reads a two-column `district,status` CSV with status one of
    /// `developed`, `moderately_developed`, `least_developed`.
    pub fn from_csv<R: Read>(source: R) -> Result<Self, ScoringError> {
        let mut reader = csv::Reader::from_reader(source);
        let mut map = HashMap::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| ScoringError::MalformedTable { line, detail: e.to_string() })?;
            let (Some(name), Some(status)) = (rec.get(0), rec.get(1)) else {
                return Err(ScoringError::MalformedTable { line, detail: "expected two columns".into() });
            };
            let dev = Development::parse(status.trim())
                .ok_or_else(|| ScoringError::MalformedTable { line, detail: format!("unknown status {status:?}") })?;
            map.insert(key(name), (name.trim().to_string(), dev));
        }
        Ok(DistrictTable { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn lookup(&self, district: &str) -> Option<Development> {
        self.map.get(&key(district)).map(|(_, d)| *d)
    }

    /// Districts of one class, sorted by name.
    pub fn districts(&self, dev: Development) -> Vec<String> {
        let mut v: Vec<String> = self.map.values().filter(|(_, d)| *d == dev).map(|(n, _)| n.clone()).collect();
        v.sort();
        v
    }
}

fn key(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Economic status row: `(original s2, reconstructed r2)`.
pub fn score_economic(food: FoodSufficiency, percap_income: f64) -> (i32, i32) {
    match food {
        FoodSufficiency::Lt3Months | FoodSufficiency::NoLand => (20, 4),
        FoodSufficiency::Lt6Months => (15, 3),
        FoodSufficiency::Ge6Months if percap_income < INCOME_CUTOFF => (15, 3),
        FoodSufficiency::Ge6Months => (0, 0),
    }
}

/// Social status row: `(original s3, reconstructed r3)`. The first matching
/// row wins.
pub fn score_social(gender: Gender, caste: Caste, special: SpecialGroups, is_poor: bool) -> (i32, i32) {
    let flagged = !special.is_empty();
    match gender {
        Gender::Female if caste == Caste::Dalit || flagged => (25, 5),
        Gender::Female if is_poor => (20, 4),
        Gender::Male if matches!(caste, Caste::Dalit | Caste::Janjati | Caste::Madhesi) || flagged => (15, 3),
        Gender::Male if is_poor => (10, 2),
        _ => (0, 0),
    }
}

/// District row: `(original s4, reconstructed r4)`.
pub fn score_district(table: &DistrictTable, district: &str) -> Result<(i32, i32), ScoringError> {
    match table.lookup(district) {
        Some(Development::Least) => Ok((10, 2)),
        Some(Development::Moderate) => Ok((5, 1)),
        Some(Development::Developed) => Ok((0, 0)),
        None => Err(ScoringError::UnknownDistrict(district.to_string())),
    }
}

/// Form-based rows for one record: original `(s2, s3, s4)` and
/// reconstructed `(r2, r3, r4)`.
pub fn score_form(record: &ApplicantRecord, table: &DistrictTable) -> Result<([i32; 3], [i32; 3]), ScoringError> {
    let missing = |field| ScoringError::MissingField { applicant_id: record.applicant_id, field };
    let food = record.food_sufficiency.ok_or_else(|| missing("food_sufficiency"))?;
    let income = match (food, record.percap_income) {
        (FoodSufficiency::Ge6Months, None) => return Err(missing("percap_income")),
        (_, v) => v.unwrap_or(0.0),
    };
    let (s2, r2) = score_economic(food, income);
    let gender = record.gender.ok_or_else(|| missing("gender"))?;
    let caste = record.caste.ok_or_else(|| missing("caste"))?;
    let (s3, r3) = score_social(gender, caste, record.special_group, s2 > 0);
    let district = record.district.as_deref().ok_or_else(|| missing("district"))?;
    let (s4, r4) = score_district(table, district)?;
    Ok(([s2, s3, s4], [r2, r3, r4]))
}

/// Original and reconstructed sub-scores of one applicant.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreComponents {
    pub applicant_id: ApplicantId,
    pub course_id: CourseId,
    pub orig: [i32; 5],
    /// `r1..r4`.
    pub recon: [i32; 4],
    pub r5: f64,
}

impl ScoreComponents {
    pub fn recon_total(&self) -> f64 {
        assemble_reconstructed(self.recon, self.r5)
    }
}

pub fn assemble_reconstructed(r: [i32; 4], r5: f64) -> f64 {
    r.iter().sum::<i32>() as f64 + r5
}

/// Reconstructed scores for a set of panels, plus a log of fallbacks and
/// dropped regressors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub components: BTreeMap<ApplicantId, ScoreComponents>,
    pub notes: Vec<String>,
}

impl ScoreTable {
    pub fn recon_total(&self, id: ApplicantId) -> Option<f64> {
        self.components.get(&id).map(ScoreComponents::recon_total)
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["applicant_id", "course_id", "r1", "r2", "r3", "r4", "r5", "recon_total"])?;
        for c in self.components.values() {
            w.write_record([
                c.applicant_id.to_string(),
                c.course_id.to_string(),
                c.recon[0].to_string(),
                c.recon[1].to_string(),
                c.recon[2].to_string(),
                c.recon[3].to_string(),
                c.r5.to_string(),
                c.recon_total().to_string(),
            ])?;
        }
        w.flush()
    }

    /// Reads reconstructed scores written by `write_csv`. Original sub-scores
    /// are taken from the panels.
    pub fn read_csv<R: Read>(source: R, panels: &[CoursePanel]) -> Result<Self, ScoringError> {
        let orig: HashMap<ApplicantId, [i32; 5]> =
            panels.iter().flat_map(|p| &p.records).map(|r| (r.applicant_id, r.orig_subscores.0)).collect();
        let mut reader = csv::Reader::from_reader(source);
        let mut components = BTreeMap::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let bad = |detail: String| ScoringError::MalformedTable { line, detail };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let field = |j: usize| rec.get(j).unwrap_or("").trim().to_string();
            let int = |j: usize| field(j).parse::<i64>().map_err(|_| bad(format!("column {} is not an integer", j + 1)));
            let applicant_id = int(0)? as ApplicantId;
            let course_id = int(1)? as CourseId;
            let mut recon = [0i32; 4];
            for (k, r) in recon.iter_mut().enumerate() {
                *r = int(k + 2)? as i32;
            }
            let r5: f64 = field(6).parse().map_err(|_| bad("r5 is not a number".into()))?;
            let Some(o) = orig.get(&applicant_id) else { continue };
            components.insert(applicant_id, ScoreComponents { applicant_id, course_id, orig: *o, recon, r5 });
        }
        Ok(ScoreTable { components, notes: Vec::new() })
    }
}

/// Linear model of s1 on an intercept, education level and trade-specific
/// education.
#[derive(Debug, Clone, PartialEq)]
pub struct S1Model {
    /// `[intercept, education, trade-specific]`; dropped terms are zero.
    pub coefficients: [f64; 3],
    /// Fitting-sample means, used when a predictor is missing.
    pub means: [f64; 2],
    pub dropped: Vec<usize>,
}

impl S1Model {
    pub fn predict(&self, record: &ApplicantRecord) -> f64 {
        let edu = record.education_level.map_or(self.means[0], |e| e.ordinal() as f64);
        let tse = record.trade_specific_education.map_or(self.means[1], |t| t as f64);
        self.coefficients[0] + self.coefficients[1] * edu + self.coefficients[2] * tse
    }
}

/// Fitted s1 models: one per course that has enough records outside the
/// donut, and a pooled model for the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct S1Fit {
    pub per_course: BTreeMap<CourseId, S1Model>,
    pub pooled: Option<S1Model>,
}

impl S1Fit {
    pub fn model_for(&self, course: CourseId) -> Option<&S1Model> {
        self.per_course.get(&course).or(self.pooled.as_ref())
    }
}

fn donut_rows(panel: &CoursePanel) -> impl Iterator<Item = &ApplicantRecord> {
    panel.records.iter().filter(move |r| {
        (r.orig_total() - panel.orig_threshold).abs() >= DONUT_HALF_WIDTH
            && r.education_level.is_some()
            && r.trade_specific_education.is_some()
    })
}

fn fit_s1_model(rows: &[&ApplicantRecord]) -> Result<S1Model, RegressionError> {
    let n = rows.len();
    let edu: Vec<f64> = rows.iter().map(|r| r.education_level.unwrap().ordinal() as f64).collect();
    let tse: Vec<f64> = rows.iter().map(|r| r.trade_specific_education.unwrap() as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.orig_subscores.0[0] as f64).collect();
    let means = [edu.iter().sum::<f64>() / n as f64, tse.iter().sum::<f64>() / n as f64];
    let x = regression::design(&[vec![1.0; n], edu, tse]);
    let fit = regression::ols_with(&x, &y, None, regression::Covariance::None)?;
    let full = fit.full_coefficients(3);
    Ok(S1Model { coefficients: [full[0], full[1], full[2]], means, dropped: fit.dropped_columns.clone() })
}

/// Fits the s1 models on records at least `DONUT_HALF_WIDTH` original points
/// from their course threshold.
pub fn fit_s1(panels: &[CoursePanel]) -> Result<S1Fit, ScoringError> {
    let mut per_course = BTreeMap::new();
    let mut needs_pool = false;
    for p in panels {
        let rows: Vec<&ApplicantRecord> = donut_rows(p).collect();
        if rows.len() < 2 {
            needs_pool = true;
            continue;
        }
        per_course.insert(p.course_id, fit_s1_model(&rows)?);
    }
    let pooled = if needs_pool {
        let rows: Vec<&ApplicantRecord> = panels.iter().flat_map(donut_rows).collect();
        if rows.len() < 2 {
            return Err(ScoringError::InsufficientDonutSample(None));
        }
        Some(fit_s1_model(&rows)?)
    } else {
        None
    };
    Ok(S1Fit { per_course, pooled })
}

/// Rounds a predicted original s1 to the rubric grid and rescales to 0..=3.
pub fn round_s1(prediction: f64) -> i32 {
    let snapped = (prediction / 5.0).round() * 5.0;
    (snapped.clamp(0.0, 15.0) / 5.0) as i32
}

/// Reconstructed technical-education score for every record.
pub fn reconstruct_s1(panels: &[CoursePanel]) -> Result<(BTreeMap<ApplicantId, i32>, Vec<String>), ScoringError> {
    let fit = fit_s1(panels)?;
    let mut notes = Vec::new();
    let mut out = BTreeMap::new();
    for p in panels {
        if !fit.per_course.contains_key(&p.course_id) {
            notes.push(format!("course {}: s1 predicted from the pooled model", p.course_id));
        }
        let model = fit.model_for(p.course_id).ok_or(ScoringError::InsufficientDonutSample(Some(p.course_id)))?;
        for r in &p.records {
            out.insert(r.applicant_id, round_s1(model.predict(r)));
        }
    }
    Ok((out, notes))
}

/// Names of the fifteen s5 regressors: the four sub-scores and all of their
/// interactions.
pub fn s5_regressor_names() -> Vec<String> {
    subsets().iter().map(|m| m.iter().map(|i| format!("s{}", i + 1)).collect::<Vec<_>>().join("x")).collect()
}

fn subsets() -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u32..16).map(|mask| (0..4).filter(|i| mask & (1 << i) != 0).collect()).collect();
    out.sort_by_key(|s| (s.len(), s.clone()));
    out
}

fn s5_row(s: &[i32; 5], terms: &[Vec<usize>]) -> Vec<f64> {
    terms.iter().map(|t| t.iter().map(|&i| s[i] as f64).product()).collect()
}

/// Residuals of s5 on the sub-score interactions and course effects, each
/// divided by five.
pub fn reconstruct_s5(panels: &[CoursePanel]) -> Result<(BTreeMap<ApplicantId, f64>, Vec<String>), ScoringError> {
    let terms = subsets();
    let k = terms.len();
    let n: usize = panels.iter().map(|p| p.records.len()).sum();
    let mut x = DMatrix::zeros(n, k);
    let mut y = vec![0.0; n];
    let mut row = 0;
    // course effects are absorbed by demeaning within course
    for p in panels {
        let raw: Vec<Vec<f64>> = p.records.iter().map(|r| s5_row(&r.orig_subscores.0, &terms)).collect();
        let s5: Vec<f64> = p.records.iter().map(|r| r.orig_subscores.0[4] as f64).collect();
        let m = p.records.len();
        for j in 0..k {
            let constant = raw.iter().all(|v| v[j] == raw[0][j]);
            let mean = raw.iter().map(|v| v[j]).sum::<f64>() / m as f64;
            for (i, v) in raw.iter().enumerate() {
                x[(row + i, j)] = if constant { 0.0 } else { v[j] - mean };
            }
        }
        let ymean = s5.iter().sum::<f64>() / m as f64;
        let yconst = s5.iter().all(|&v| v == s5[0]);
        for (i, v) in s5.iter().enumerate() {
            y[row + i] = if yconst { 0.0 } else { v - ymean };
        }
        row += m;
    }

    let mut notes = Vec::new();
    let residuals = match regression::ols_with(&x, &y, None, regression::Covariance::None) {
        Ok(fit) => {
            let names = s5_regressor_names();
            for &j in &fit.dropped_columns {
                notes.push(format!("s5 model: dropped collinear term {}", names[j]));
            }
            fit.residuals
        }
        // no within-course variation in any regressor
        Err(RegressionError::SingularAfterDrop) => y,
        Err(e) => return Err(e.into()),
    };

    let mut out = BTreeMap::new();
    let mut i = 0;
    for p in panels {
        for r in &p.records {
            out.insert(r.applicant_id, residuals[i] / 5.0);
            i += 1;
        }
    }
    Ok((out, notes))
}

/// All reconstructed components for every record of the panels.
pub fn reconstruct(panels: &[CoursePanel], table: &DistrictTable) -> Result<ScoreTable, ScoringError> {
    let (r1, mut notes) = reconstruct_s1(panels)?;
    let (r5, notes5) = reconstruct_s5(panels)?;
    notes.extend(notes5);
    let mut components = BTreeMap::new();
    for p in panels {
        for r in &p.records {
            let (_, form) = score_form(r, table)?;
            components.insert(
                r.applicant_id,
                ScoreComponents {
                    applicant_id: r.applicant_id,
                    course_id: p.course_id,
                    orig: r.orig_subscores.0,
                    recon: [r1[&r.applicant_id], form[0], form[1], form[2]],
                    r5: r5[&r.applicant_id],
                },
            );
        }
    }
    Ok(ScoreTable { components, notes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SpecialGroup, SubScores, Trade};

    #[test]
    fn economic_rows() {
        assert_eq!(score_economic(FoodSufficiency::Lt3Months, 5000.0), (20, 4));
        assert_eq!(score_economic(FoodSufficiency::Ge6Months, 3000.0), (0, 0));
        assert_eq!(score_economic(FoodSufficiency::Ge6Months, 2999.0), (15, 3));
        assert_eq!(score_economic(FoodSufficiency::NoLand, 10000.0), (20, 4));
    }

    #[test]
    fn social_rows() {
        let widow = SpecialGroups::empty().with(SpecialGroup::Widow);
        assert_eq!(score_social(Gender::Female, Caste::Other, widow, false), (25, 5));
        assert_eq!(score_social(Gender::Male, Caste::Janjati, SpecialGroups::empty(), false), (15, 3));
        assert_eq!(score_social(Gender::Female, Caste::Other, SpecialGroups::empty(), false), (0, 0));
        assert_eq!(score_social(Gender::Female, Caste::Janjati, SpecialGroups::empty(), true), (20, 4));
        assert_eq!(score_social(Gender::Male, Caste::Other, SpecialGroups::empty(), true), (10, 2));
    }

    #[test]
    fn district_rows() {
        let t = DistrictTable::bundled();
        assert_eq!(t.len(), 75);
        assert_eq!(score_district(&t, "Jumla"), Ok((10, 2)));
        assert_eq!(score_district(&t, "Kathmandu"), Ok((0, 0)));
        assert_eq!(score_district(&t, "Gorkha"), Ok((5, 1)));
        assert_eq!(score_district(&t, "gorkha "), Ok((5, 1)));
        assert!(matches!(score_district(&t, "Atlantis"), Err(ScoringError::UnknownDistrict(_))));
    }

    #[test]
    fn rounding_grid() {
        assert_eq!(round_s1(12.4), 2);
        assert_eq!(round_s1(12.5), 3);
        assert_eq!(round_s1(-3.0), 0);
        assert_eq!(round_s1(22.0), 3);
        assert_eq!(round_s1(2.5), 1);
    }

    #[test]
    fn assembly() {
        assert!((assemble_reconstructed([3, 4, 5, 2], 1.2) - 15.2).abs() < 1e-12);
        assert_eq!(assemble_reconstructed([0, 0, 0, 0], 0.0), 0.0);
    }

    #[test]
    fn regressor_names() {
        let names = s5_regressor_names();
        assert_eq!(names.len(), 15);
        assert_eq!(names[0], "s1");
        assert_eq!(names[14], "s1xs2xs3xs4");
    }

    fn rec(id: u64, s: [i32; 5]) -> ApplicantRecord {
        ApplicantRecord {
            applicant_id: id,
            course_id: 1,
            cohort: None,
            gender: None,
            age: None,
            caste: None,
            special_group: SpecialGroups::empty(),
            education_level: Some(crate::dataset::EducationLevel::SlcPass),
            trade_specific_education: Some(3),
            food_sufficiency: None,
            percap_income: None,
            district: None,
            orig_subscores: SubScores(s),
            treated: false,
            outcomes: BTreeMap::new(),
            attrited_w1: false,
            attrited_w2: false,
        }
    }

    #[test]
    fn constant_s1_reproduced() {
        let recs = (0..6).map(|i| rec(i, [15, 20, 5 * (i as i32 % 3), 10, 3 * i as i32])).collect();
        let p = CoursePanel::new(1, recs, 3, Trade::Farming);
        let (r1, _) = reconstruct_s1(&[p]).unwrap();
        assert!(r1.values().all(|&v| v == 3));
    }
}
