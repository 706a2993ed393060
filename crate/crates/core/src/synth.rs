//! Synthetic applicant panels with planted effects.
//!
//! Every random draw comes from a ChaCha8 stream keyed by
//! `(seed, course_id, applicant index, purpose)`, so output does not depend
//! on iteration order or thread count. Application-form fields are drawn
//! first and the original sub-scores s2-s4 are derived from them through the
//! rubric; s1 is five times the trade-specific education level and s5 is an
//! independent interview score.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{
    seats_threshold, ApplicantId, ApplicantRecord, Caste, CourseId, CoursePanel, Dataset, EducationLevel,
    FoodSufficiency, Gender, OutcomeColumns, OutcomeValues, SpecialGroup, SpecialGroups, SubScores, Token, Trade,
};
use crate::scoring::{self, DistrictTable, ScoreTable, ScoringError};

/// Manipulation share used when manipulation is switched on without an
/// explicit fraction.
pub const DEFAULT_MANIPULATION_FRACTION: f64 = 0.10;

/// Outcome carrying the planted effect.
pub const EARNINGS: &str = "earnings";
/// Binary engagement outcome.
pub const ANY_IGA: &str = "any_iga";

const COURSE_STREAM: u64 = u64::MAX;
const PURPOSE_DRAWS: u64 = 0;
const PURPOSE_MANIPULATION: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Group receiving an additive shift of the treatment effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EffectGroup {
    Female,
    Male,
    Trade(Trade),
}

impl EffectGroup {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "female" => Some(EffectGroup::Female),
            "male" => Some(EffectGroup::Male),
            other => other.strip_prefix("trade:").and_then(Trade::parse_token).map(EffectGroup::Trade),
        }
    }

    fn applies(&self, gender: Gender, trade: Trade) -> bool {
        match self {
            EffectGroup::Female => gender == Gender::Female,
            EffectGroup::Male => gender == Gender::Male,
            EffectGroup::Trade(t) => *t == trade,
        }
    }
}

impl fmt::Display for EffectGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EffectGroup::Female => f.write_str("female"),
            EffectGroup::Male => f.write_str("male"),
            EffectGroup::Trade(t) => write!(f, "trade:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_courses: usize,
    pub applicants_mean: usize,
    /// Course sizes are uniform on `mean ± jitter`.
    pub applicants_jitter: usize,
    /// Seats as a share of applicants, rounded down.
    pub seats_fraction: f64,
    /// Interview scores are `30 * Beta(s5_alpha, s5_beta)`, rounded.
    pub s5_alpha: f64,
    pub s5_beta: f64,
    pub p_take_assigned: f64,
    pub p_take_rejected: f64,
    pub late_true: f64,
    pub heterogeneity: Vec<(EffectGroup, f64)>,
    /// Outcome growth per original score point below the threshold.
    pub slope_left: f64,
    pub slope_right: f64,
    pub curvature: f64,
    pub outcome_sd: f64,
    pub cluster_sd: f64,
    /// Loading of outcome growth on latent employability.
    pub latent_loading: f64,
    pub iga_effect: f64,
    /// Records pushed over the threshold, as a share of all records within
    /// `manipulation_window` points of it on either side.
    pub manipulation_fraction: f64,
    /// Weight of latent employability in choosing whom to push.
    pub manipulation_strength: f64,
    /// Largest original-score gap a push can close.
    pub manipulation_window: i32,
    pub attrition_base: f64,
    pub attrition_diff: f64,
    /// When positive, training is chosen on observables (age, gender)
    /// instead of following assignment.
    pub selection_strength: f64,
    /// Loading of outcome growth on the selection index.
    pub selection_growth: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_courses: 200,
            applicants_mean: 20,
            applicants_jitter: 4,
            seats_fraction: 2.0 / 3.0,
            s5_alpha: 0.5,
            s5_beta: 0.5,
            p_take_assigned: 0.70,
            p_take_rejected: 0.32,
            late_true: 2.0,
            heterogeneity: Vec::new(),
            slope_left: 0.02,
            slope_right: 0.02,
            curvature: 0.0,
            outcome_sd: 1.0,
            cluster_sd: 0.5,
            latent_loading: 0.5,
            iga_effect: 0.2,
            manipulation_fraction: 0.0,
            manipulation_strength: 2.0,
            manipulation_window: 5,
            attrition_base: 0.1,
            attrition_diff: 0.0,
            selection_strength: 0.0,
            selection_growth: 0.0,
            seed: 1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, SynthError> {
    value.trim().parse().map_err(|_| SynthError::ConfigInvalid(format!("{key}: cannot parse {value:?}")))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        let probs = [
            ("p_take_assigned", self.p_take_assigned),
            ("p_take_rejected", self.p_take_rejected),
            ("manipulation_fraction", self.manipulation_fraction),
            ("attrition_base", self.attrition_base),
            ("attrition_base + attrition_diff", self.attrition_base + self.attrition_diff),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.n_courses == 0 {
            return bad("n_courses must be at least 1".into());
        }
        if self.applicants_jitter >= self.applicants_mean || self.applicants_mean - self.applicants_jitter < 3 {
            return bad("every course needs at least 3 applicants".into());
        }
        if self.applicants_mean + self.applicants_jitter >= 1000 {
            return bad("courses are limited to 999 applicants".into());
        }
        if !(self.seats_fraction > 0.0 && self.seats_fraction <= 2.0 / 3.0 + 1e-12) {
            return bad("seats_fraction must lie in (0, 2/3]".into());
        }
        if self.selection_strength <= 0.0 && self.p_take_assigned < self.p_take_rejected {
            return bad("take-up when assigned must be at least take-up when rejected".into());
        }
        if !(self.s5_alpha > 0.0 && self.s5_beta > 0.0 && self.s5_alpha.is_finite() && self.s5_beta.is_finite()) {
            return bad("interview score shape parameters must be positive".into());
        }
        for (name, v) in [("outcome_sd", self.outcome_sd), ("cluster_sd", self.cluster_sd)] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if self.manipulation_window < 1 {
            return bad("manipulation_window must be at least 1".into());
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SynthError> {
        match key {
            "n_courses" => self.n_courses = parse_num(key, value)?,
            "applicants_mean" => self.applicants_mean = parse_num(key, value)?,
            "applicants_jitter" => self.applicants_jitter = parse_num(key, value)?,
            "seats_fraction" => self.seats_fraction = parse_num(key, value)?,
            "s5_alpha" => self.s5_alpha = parse_num(key, value)?,
            "s5_beta" => self.s5_beta = parse_num(key, value)?,
            "p_take_assigned" => self.p_take_assigned = parse_num(key, value)?,
            "p_take_rejected" => self.p_take_rejected = parse_num(key, value)?,
            "late_true" => self.late_true = parse_num(key, value)?,
            "heterogeneity" => {
                self.heterogeneity = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|item| {
                        let (g, v) = item.split_once(':').and_then(|(g, v)| {
                            // trade groups carry their own colon
                            if g.trim() == "trade" {
                                let (t, v) = v.split_once(':')?;
                                Some((format!("trade:{t}"), v))
                            } else {
                                Some((g.to_string(), v))
                            }
                        })
                        .ok_or_else(|| SynthError::ConfigInvalid(format!("heterogeneity item {item:?}")))?;
                        let group = EffectGroup::parse(&g)
                            .ok_or_else(|| SynthError::ConfigInvalid(format!("unknown group {g:?}")))?;
                        Ok((group, parse_num(key, v)?))
                    })
                    .collect::<Result<_, SynthError>>()?
            }
            "slope_left" => self.slope_left = parse_num(key, value)?,
            "slope_right" => self.slope_right = parse_num(key, value)?,
            "curvature" => self.curvature = parse_num(key, value)?,
            "outcome_sd" => self.outcome_sd = parse_num(key, value)?,
            "cluster_sd" => self.cluster_sd = parse_num(key, value)?,
            "latent_loading" => self.latent_loading = parse_num(key, value)?,
            "iga_effect" => self.iga_effect = parse_num(key, value)?,
            "manipulation_fraction" => self.manipulation_fraction = parse_num(key, value)?,
            "manipulation_strength" => self.manipulation_strength = parse_num(key, value)?,
            "manipulation_window" => self.manipulation_window = parse_num(key, value)?,
            "attrition_base" => self.attrition_base = parse_num(key, value)?,
            "attrition_diff" => self.attrition_diff = parse_num(key, value)?,
            "selection_strength" => self.selection_strength = parse_num(key, value)?,
            "selection_growth" => self.selection_growth = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            other => return Err(SynthError::ConfigInvalid(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` in a fixed order, accepted back by `set`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let het = self.heterogeneity.iter().map(|(g, v)| format!("{g}:{v}")).collect::<Vec<_>>().join(",");
        vec![
            ("n_courses", self.n_courses.to_string()),
            ("applicants_mean", self.applicants_mean.to_string()),
            ("applicants_jitter", self.applicants_jitter.to_string()),
            ("seats_fraction", self.seats_fraction.to_string()),
            ("s5_alpha", self.s5_alpha.to_string()),
            ("s5_beta", self.s5_beta.to_string()),
            ("p_take_assigned", self.p_take_assigned.to_string()),
            ("p_take_rejected", self.p_take_rejected.to_string()),
            ("late_true", self.late_true.to_string()),
            ("heterogeneity", het),
            ("slope_left", self.slope_left.to_string()),
            ("slope_right", self.slope_right.to_string()),
            ("curvature", self.curvature.to_string()),
            ("outcome_sd", self.outcome_sd.to_string()),
            ("cluster_sd", self.cluster_sd.to_string()),
            ("latent_loading", self.latent_loading.to_string()),
            ("iga_effect", self.iga_effect.to_string()),
            ("manipulation_fraction", self.manipulation_fraction.to_string()),
            ("manipulation_strength", self.manipulation_strength.to_string()),
            ("manipulation_window", self.manipulation_window.to_string()),
            ("attrition_base", self.attrition_base.to_string()),
            ("attrition_diff", self.attrition_diff.to_string()),
            ("selection_strength", self.selection_strength.to_string()),
            ("selection_growth", self.selection_growth.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// The same configuration with manipulation at its default share.
    pub fn manipulated(self) -> Self {
        SynthConfig { manipulation_fraction: DEFAULT_MANIPULATION_FRACTION, ..self }
    }

    pub fn itt_implied(&self) -> f64 {
        self.late_true * (self.p_take_assigned - self.p_take_rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComplianceType {
    Complier,
    AlwaysTaker,
    NeverTaker,
    /// Training chosen on observables.
    Selected,
}

impl ComplianceType {
    pub fn as_str(self) -> &'static str {
        match self {
            ComplianceType::Complier => "complier",
            ComplianceType::AlwaysTaker => "always_taker",
            ComplianceType::NeverTaker => "never_taker",
            ComplianceType::Selected => "selected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordTruth {
    pub course_id: CourseId,
    pub compliance: ComplianceType,
    pub latent: f64,
    /// Individual treatment effect on earnings.
    pub effect: f64,
    /// Earnings growth attributable to the selection index.
    pub selection_growth: f64,
    pub manipulated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthGroundTruth {
    pub late_true: f64,
    pub itt_implied: f64,
    pub p_take_assigned: f64,
    pub p_take_rejected: f64,
    /// Original thresholds as generated, before any manipulation.
    pub thresholds: BTreeMap<CourseId, i32>,
    pub records: BTreeMap<ApplicantId, RecordTruth>,
    /// Applicants whose s5 was raised, in selection order.
    pub manipulated: Vec<ApplicantId>,
    pub manipulation_fraction: f64,
    pub manipulation_strength: f64,
}

impl SynthGroundTruth {
    pub fn write_records_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["applicant_id", "course_id", "compliance", "latent", "effect", "selection_growth", "manipulated"])?;
        for (id, r) in &self.records {
            w.write_record([
                id.to_string(),
                r.course_id.to_string(),
                r.compliance.as_str().to_string(),
                r.latent.to_string(),
                r.effect.to_string(),
                r.selection_growth.to_string(),
                (r.manipulated as u8).to_string(),
            ])?;
        }
        w.flush()
    }

    pub fn write_params_csv<W: Write>(&self, config: &SynthConfig, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["key", "value"])?;
        w.write_record(["late_true".to_string(), self.late_true.to_string()])?;
        w.write_record(["itt_implied".to_string(), self.itt_implied.to_string()])?;
        w.write_record(["n_manipulated".to_string(), self.manipulated.len().to_string()])?;
        for (k, v) in config.entries() {
            w.write_record([format!("config.{k}"), v])?;
        }
        for (c, t) in &self.thresholds {
            w.write_record([format!("threshold.{c}"), t.to_string()])?;
        }
        w.flush()
    }
}

/// Random stream for one purpose of one applicant (or of the course when
/// `index` is `COURSE_STREAM`).
fn stream(seed: u64, course: CourseId, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&course.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(&purpose.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[(T, f64)]) -> T {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(v, w) in items {
        acc += w;
        if u < acc {
            return v;
        }
    }
    items[items.len() - 1].0
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every random quantity of one applicant, drawn in a fixed order before
/// the course threshold is known.
struct Draws {
    gender: Gender,
    age: f64,
    caste: Caste,
    special: SpecialGroups,
    education: EducationLevel,
    tse: i32,
    food: FoodSufficiency,
    income: f64,
    district: usize,
    s5: i32,
    latent: f64,
    u_type: f64,
    u_select: f64,
    base_noise: f64,
    growth_noise: f64,
    u_iga_base: f64,
    u_iga_fu: f64,
    u_attr: f64,
}

fn draw_applicant(rng: &mut ChaCha8Rng, interview: &Beta<f64>, n_districts: usize) -> Draws {
    let gender = if rng.random::<f64>() < 0.6 { Gender::Female } else { Gender::Male };
    let age = (27.0 + 6.0 * normal(rng)).round().clamp(16.0, 45.0);
    let caste = pick(
        rng,
        &[(Caste::Dalit, 0.15), (Caste::Janjati, 0.35), (Caste::Madhesi, 0.15), (Caste::Muslim, 0.05), (Caste::Other, 0.30)],
    );
    let mut special = SpecialGroups::empty();
    if rng.random::<f64>() < 0.1 {
        special.insert(SpecialGroup::ALL[rng.random_range(0..SpecialGroup::ALL.len())]);
    }
    let education = pick(
        rng,
        &[
            (EducationLevel::Illiterate, 0.08),
            (EducationLevel::BelowClass5, 0.15),
            (EducationLevel::Class5To8, 0.25),
            (EducationLevel::Class9To10, 0.22),
            (EducationLevel::SlcPass, 0.18),
            (EducationLevel::Plus2, 0.08),
            (EducationLevel::BachelorPlus, 0.04),
        ],
    );
    let tse = pick(rng, &[(3, 0.60), (2, 0.25), (1, 0.15)]);
    let food = pick(
        rng,
        &[
            (FoodSufficiency::Lt3Months, 0.30),
            (FoodSufficiency::Lt6Months, 0.30),
            (FoodSufficiency::Ge6Months, 0.30),
            (FoodSufficiency::NoLand, 0.10),
        ],
    );
    let income = (2000f64.ln() + 0.5 * normal(rng)).exp().round();
    let district = rng.random_range(0..n_districts);
    let s5 = (30.0 * rng.sample::<f64, _>(interview)).round() as i32;
    Draws {
        gender,
        age,
        caste,
        special,
        education,
        tse,
        food,
        income,
        district,
        s5,
        latent: normal(rng),
        u_type: rng.random(),
        u_select: rng.random(),
        base_noise: normal(rng),
        growth_noise: normal(rng),
        u_iga_base: rng.random(),
        u_iga_fu: rng.random(),
        u_attr: rng.random(),
    }
}

/// Observable selection index used when training is chosen on
/// observables.
pub fn selection_index(age: f64, female: bool) -> f64 {
    (age - 27.0) / 6.0 + 0.8 * (if female { 1.0 } else { 0.0 } - 0.6)
}

fn district_names(table: &DistrictTable) -> Vec<String> {
    use crate::scoring::Development::*;
    let mut all = Vec::new();
    for d in [Developed, Moderate, Least] {
        all.extend(table.districts(d));
    }
    all
}

fn generate_course(
    cfg: &SynthConfig,
    course_id: CourseId,
    table: &DistrictTable,
    districts: &[String],
) -> Result<(CoursePanel, Vec<(ApplicantId, RecordTruth)>), SynthError> {
    let mut crng = stream(cfg.seed, course_id, COURSE_STREAM, PURPOSE_DRAWS);
    let j = cfg.applicants_jitter as i64;
    let n = (cfg.applicants_mean as i64 + crng.random_range(-j..=j)) as usize;
    let trade = Trade::ALL[crng.random_range(0..Trade::ALL.len())];
    let cohort = 2010 + crng.random_range(0..2);
    let cluster_base = cfg.cluster_sd * normal(&mut crng);
    let cluster_growth = cfg.cluster_sd * normal(&mut crng);
    let seats = ((cfg.seats_fraction * n as f64 + 1e-9).floor() as u32).max(1);

    let interview = Beta::new(cfg.s5_alpha, cfg.s5_beta)
        .map_err(|e| SynthError::ConfigInvalid(format!("interview score shape: {e}")))?;
    let draws: Vec<Draws> = (0..n)
        .map(|i| draw_applicant(&mut stream(cfg.seed, course_id, i as u64, PURPOSE_DRAWS), &interview, districts.len()))
        .collect();

    let mut subs = Vec::with_capacity(n);
    for d in &draws {
        let (s2, _) = scoring::score_economic(d.food, d.income);
        let (s3, _) = scoring::score_social(d.gender, d.caste, d.special, s2 > 0);
        let (s4, _) = scoring::score_district(table, &districts[d.district])?;
        subs.push(SubScores([5 * d.tse, s2, s3, s4, d.s5]));
    }
    let threshold = seats_threshold(subs.iter().map(SubScores::total), seats);

    let mut records = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for (i, (d, s)) in draws.iter().zip(&subs).enumerate() {
        let applicant_id = course_id as u64 * 1000 + i as u64 + 1;
        let rel = (s.total() - threshold) as f64;
        let assigned = rel >= 0.0;
        let female = d.gender == Gender::Female;
        let z = selection_index(d.age, female);

        let (compliance, treated) = if cfg.selection_strength > 0.0 {
            (ComplianceType::Selected, d.u_select < sigmoid(cfg.selection_strength * z))
        } else if d.u_type < cfg.p_take_rejected {
            (ComplianceType::AlwaysTaker, true)
        } else if d.u_type < cfg.p_take_assigned {
            (ComplianceType::Complier, assigned)
        } else {
            (ComplianceType::NeverTaker, false)
        };

        let effect = cfg.late_true
            + cfg.heterogeneity.iter().filter(|(g, _)| g.applies(d.gender, trade)).map(|(_, v)| v).sum::<f64>();
        let selection_growth = if cfg.selection_strength > 0.0 { cfg.selection_growth * z } else { 0.0 };
        let slope = if rel < 0.0 { cfg.slope_left } else { cfg.slope_right };
        let trend = slope * rel + cfg.curvature * rel * rel;
        let d_num = if treated { 1.0 } else { 0.0 };

        let base = 10.0 + 0.05 * (s.total() as f64 - 50.0) + cluster_base + 0.5 * d.latent + d.base_noise;
        let growth = trend
            + cfg.latent_loading * d.latent
            + cluster_growth
            + selection_growth
            + effect * d_num
            + cfg.outcome_sd * d.growth_noise;
        let iga_base = if d.u_iga_base < 0.4 { 1.0 } else { 0.0 };
        let p_iga = (0.45 + cfg.iga_effect * d_num + 0.05 * d.latent).clamp(0.01, 0.99);
        let iga_fu = if d.u_iga_fu < p_iga { 1.0 } else { 0.0 };

        let p_attr = cfg.attrition_base + if assigned { cfg.attrition_diff } else { 0.0 };
        let attrited = d.u_attr < p_attr;
        let fu = |v: f64| if attrited { None } else { Some(v) };

        let mut outcomes = BTreeMap::new();
        outcomes.insert(EARNINGS.to_string(), OutcomeValues { baseline: base, followup: fu(base + growth), followup2: None });
        outcomes.insert(ANY_IGA.to_string(), OutcomeValues { baseline: iga_base, followup: fu(iga_fu), followup2: None });

        records.push(ApplicantRecord {
            applicant_id,
            course_id,
            cohort: Some(cohort),
            gender: Some(d.gender),
            age: Some(d.age),
            caste: Some(d.caste),
            special_group: d.special,
            education_level: Some(d.education),
            trade_specific_education: Some(d.tse),
            food_sufficiency: Some(d.food),
            percap_income: Some(d.income),
            district: Some(districts[d.district].clone()),
            orig_subscores: *s,
            treated,
            outcomes,
            attrited_w1: attrited,
            attrited_w2: false,
        });
        truths.push((
            applicant_id,
            RecordTruth { course_id, compliance, latent: d.latent, effect, selection_growth, manipulated: false },
        ));
    }
    let panel = CoursePanel::new(course_id, records, seats, trade);
    debug_assert_eq!(panel.orig_threshold, threshold);
    Ok((panel, truths))
}

/// Generates a clean (unmanipulated) dataset with its ground truth.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, SynthGroundTruth), SynthError> {
    config.validate()?;
    let table = DistrictTable::bundled();
    let districts = district_names(&table);
    let courses: Vec<(CoursePanel, Vec<(ApplicantId, RecordTruth)>)> = (1..=config.n_courses as CourseId)
        .into_par_iter()
        .map(|c| generate_course(config, c, &table, &districts))
        .collect::<Result<_, _>>()?;

    let mut panels = Vec::with_capacity(courses.len());
    let mut records = BTreeMap::new();
    let mut thresholds = BTreeMap::new();
    for (p, truths) in courses {
        thresholds.insert(p.course_id, p.orig_threshold);
        records.extend(truths);
        panels.push(p);
    }
    let outcomes = vec![
        OutcomeColumns { name: ANY_IGA.to_string(), has_followup2: false },
        OutcomeColumns { name: EARNINGS.to_string(), has_followup2: false },
    ];
    let truth = SynthGroundTruth {
        late_true: config.late_true,
        itt_implied: config.itt_implied(),
        p_take_assigned: config.p_take_assigned,
        p_take_rejected: config.p_take_rejected,
        thresholds,
        records,
        manipulated: Vec::new(),
        manipulation_fraction: 0.0,
        manipulation_strength: config.manipulation_strength,
    };
    Ok((Dataset { panels, outcomes }, truth))
}

/// Pushes near-threshold rejected applicants over their course's original
/// threshold by raising their interview score (s5).
///
/// Eligible applicants are below the threshold by at most
/// `manipulation_window` points and have room in s5. They are ranked by
/// `strength * latent + noise` across all courses, and the top ones are
/// moved exactly onto the threshold. The number moved is
/// `manipulation_fraction` times the count of records within the window on
/// either side, capped at the number eligible.
/// Each course's seat count grows by the number moved, which keeps the
/// threshold where it was. Treatment, outcomes and form fields are left as
/// they were.
pub fn apply_manipulation(panels: &mut [CoursePanel], truth: &mut SynthGroundTruth, config: &SynthConfig) {
    if config.manipulation_fraction <= 0.0 {
        return;
    }
    let mut eligible: Vec<(f64, ApplicantId, usize, usize, i32)> = Vec::new();
    let mut near = 0usize;
    for (pi, p) in panels.iter().enumerate() {
        let t = p.orig_threshold;
        for (ri, r) in p.records.iter().enumerate() {
            let gap = t - r.orig_total();
            if gap.abs() <= config.manipulation_window {
                near += 1;
            }
            if gap < 1 || gap > config.manipulation_window || r.orig_subscores.0[4] + gap > 30 {
                continue;
            }
            let latent = truth.records.get(&r.applicant_id).map_or(0.0, |x| x.latent);
            let index = (r.applicant_id % 1000).saturating_sub(1);
            let noise = normal(&mut stream(config.seed, p.course_id, index, PURPOSE_MANIPULATION));
            eligible.push((config.manipulation_strength * latent + noise, r.applicant_id, pi, ri, gap));
        }
    }
    eligible.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let take = ((config.manipulation_fraction * near as f64).round() as usize).min(eligible.len());
    let mut shifted: BTreeMap<usize, u32> = BTreeMap::new();
    for &(_, id, pi, ri, gap) in eligible.iter().take(take) {
        panels[pi].records[ri].orig_subscores.0[4] += gap;
        *shifted.entry(pi).or_default() += 1;
        truth.manipulated.push(id);
        if let Some(rt) = truth.records.get_mut(&id) {
            rt.manipulated = true;
        }
    }
    for (pi, m) in shifted {
        let before = panels[pi].orig_threshold;
        panels[pi].seats += m;
        panels[pi].refresh_threshold();
        debug_assert_eq!(panels[pi].orig_threshold, before);
    }
    truth.manipulation_fraction = config.manipulation_fraction;
    truth.manipulation_strength = config.manipulation_strength;
}

/// A generated dataset with reconstructed scores computed before any
/// manipulation.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub truth: SynthGroundTruth,
    pub scores: ScoreTable,
}

/// Generates, reconstructs scores on the clean panels, then applies the
/// configured manipulation.
pub fn generate_full(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    let (mut dataset, mut truth) = generate(config)?;
    let scores = scoring::reconstruct(&dataset.panels, &DistrictTable::bundled())?;
    apply_manipulation(&mut dataset.panels, &mut truth, config);
    Ok(SynthOutput { dataset, truth, scores })
}
