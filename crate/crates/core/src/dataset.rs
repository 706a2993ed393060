//! Applicant panel: record types, CSV loading and serialization, and
//! differenced outcomes.
//!
//! The CSV layout has a fixed block of applicant columns followed by one
//! column pair per outcome, `<name>_base` and `<name>_fu1`, with an optional
//! `<name>_fu2`. Empty cells are missing values. Records are grouped by
//! `course_id` and sorted by `applicant_id` within each course.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};

use thiserror::Error;

pub type ApplicantId = u64;
pub type CourseId = i64;

/// Upper bounds of the five original sub-scores.
pub const SUBSCORE_MAX: [i32; 5] = [15, 20, 25, 10, 30];
/// Rubric supports of the first four original sub-scores; the fifth ranges
/// over the integers 0..=30.
pub const SUBSCORE_SUPPORT: [&[i32]; 4] = [&[0, 5, 10, 15], &[0, 15, 20], &[0, 10, 15, 20, 25], &[0, 5, 10]];

pub const FIXED_COLUMNS: [&str; 22] = [
    "applicant_id",
    "course_id",
    "cohort",
    "seats",
    "trade",
    "gender",
    "age",
    "caste",
    "special_group",
    "education_level",
    "trade_specific_education",
    "food_sufficiency",
    "percap_income",
    "district",
    "s1",
    "s2",
    "s3",
    "s4",
    "s5",
    "treated",
    "attrited_w1",
    "attrited_w2",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("malformed CSV at row {row}, column {column}: {detail}")]
    MalformedCsv { row: u64, column: String, detail: String },
    #[error("duplicate applicant_id {0}")]
    DuplicateApplicantId(ApplicantId),
    #[error("unknown value {value:?} for {column} at row {row}")]
    UnknownEnumValue { row: u64, column: String, value: String },
    #[error("course {0} has fewer than two applicants")]
    CourseTooSmall(CourseId),
    #[error("unknown outcome {0:?}")]
    UnknownOutcome(String),
    #[error("I/O error: {0}")]
    Io(String),
}

/// Enumerated CSV fields with a fixed set of lower-case tokens.
pub trait Token: Sized + Copy + 'static {
    const ALL: &'static [Self];
    fn token(self) -> &'static str;
    fn parse_token(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.token() == s)
    }
}

macro_rules! token_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $tok:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl Token for $name {
            const ALL: &'static [Self] = &[$($name::$variant),+];
            fn token(self) -> &'static str {
                match self { $($name::$variant => $tok),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }
    };
}

token_enum!(Gender { Female => "female", Male => "male" });

token_enum!(Caste {
    Dalit => "dalit",
    Janjati => "janjati",
    Madhesi => "madhesi",
    Muslim => "muslim",
    Other => "other",
});

token_enum!(SpecialGroup {
    Widow => "widow",
    Displaced => "displaced",
    ExCombatant => "ex_combatant",
    Disabled => "disabled",
    Hiv => "hiv",
    Bonded => "bonded",
});

token_enum!(
    /// Highest completed level of general education, in increasing order.
    EducationLevel {
        Illiterate => "illiterate",
        BelowClass5 => "below_class5",
        Class5To8 => "class5_8",
        Class9To10 => "class9_10",
        SlcPass => "slc_pass",
        Plus2 => "plus2",
        BachelorPlus => "bachelor_plus",
    }
);

token_enum!(
    /// Months the family can be fed from its own land.
    FoodSufficiency {
        Lt3Months => "lt3_months",
        Lt6Months => "lt6_months",
        Ge6Months => "ge6_months",
        NoLand => "no_land",
    }
);

token_enum!(Trade {
    Farming => "farming",
    Poultry => "poultry",
    FoodHospitality => "food_hospitality",
    Electronics => "electronics",
    Handicraft => "handicraft",
    Construction => "construction",
    Beautician => "beautician",
    Tailoring => "tailoring",
    SecurityGuard => "security_guard",
});

impl EducationLevel {
    pub fn ordinal(self) -> i32 {
        Self::ALL.iter().position(|&e| e == self).unwrap() as i32
    }
}

/// Set of special-circumstance flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct SpecialGroups(u8);

impl SpecialGroups {
    pub fn empty() -> Self {
        SpecialGroups(0)
    }

    pub fn with(mut self, g: SpecialGroup) -> Self {
        self.insert(g);
        self
    }

    pub fn insert(&mut self, g: SpecialGroup) {
        self.0 |= 1 << (g as u8);
    }

    pub fn contains(self, g: SpecialGroup) -> bool {
        self.0 & (1 << (g as u8)) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = SpecialGroup> {
        SpecialGroup::ALL.iter().copied().filter(move |&g| self.contains(g))
    }

    fn parse(s: &str) -> Result<Self, String> {
        let mut out = SpecialGroups::empty();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            out.insert(SpecialGroup::parse_token(part).ok_or_else(|| part.to_string())?);
        }
        Ok(out)
    }

    fn render(self) -> String {
        self.iter().map(|g| g.token()).collect::<Vec<_>>().join(";")
    }
}

/// The five original sub-scores as recorded on the ranking form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubScores(pub [i32; 5]);

impl SubScores {
    pub fn total(&self) -> i32 {
        self.0.iter().sum()
    }

    /// Components outside their rubric supports, as `(index, value)` with a
    /// zero-based index.
    pub fn support_violations(&self) -> Vec<(usize, i32)> {
        let mut out = Vec::new();
        for (i, support) in SUBSCORE_SUPPORT.iter().enumerate() {
            if !support.contains(&self.0[i]) {
                out.push((i, self.0[i]));
            }
        }
        if !(0..=SUBSCORE_MAX[4]).contains(&self.0[4]) {
            out.push((4, self.0[4]));
        }
        out
    }
}

/// Survey waves with outcome observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Wave {
    Baseline,
    #[default]
    FollowUp1,
    FollowUp2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeValues {
    pub baseline: f64,
    pub followup: Option<f64>,
    pub followup2: Option<f64>,
}

impl OutcomeValues {
    pub fn at(&self, wave: Wave) -> Option<f64> {
        match wave {
            Wave::Baseline => Some(self.baseline),
            Wave::FollowUp1 => self.followup,
            Wave::FollowUp2 => self.followup2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApplicantRecord {
    pub applicant_id: ApplicantId,
    pub course_id: CourseId,
    pub cohort: Option<i32>,
    pub gender: Option<Gender>,
    pub age: Option<f64>,
    pub caste: Option<Caste>,
    pub special_group: SpecialGroups,
    pub education_level: Option<EducationLevel>,
    pub trade_specific_education: Option<i32>,
    pub food_sufficiency: Option<FoodSufficiency>,
    pub percap_income: Option<f64>,
    pub district: Option<String>,
    pub orig_subscores: SubScores,
    pub treated: bool,
    pub outcomes: BTreeMap<String, OutcomeValues>,
    pub attrited_w1: bool,
    pub attrited_w2: bool,
}

impl ApplicantRecord {
    pub fn orig_total(&self) -> i32 {
        self.orig_subscores.total()
    }

    pub fn is_female(&self) -> Option<bool> {
        self.gender.map(|g| g == Gender::Female)
    }

    pub fn attrited(&self, wave: Wave) -> bool {
        match wave {
            Wave::Baseline => false,
            Wave::FollowUp1 => self.attrited_w1,
            Wave::FollowUp2 => self.attrited_w2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoursePanel {
    pub course_id: CourseId,
    /// Sorted by applicant id.
    pub records: Vec<ApplicantRecord>,
    pub seats: u32,
    pub trade: Trade,
    /// Seats-th highest original total.
    pub orig_threshold: i32,
    pub sim_threshold: Option<f64>,
}

impl CoursePanel {
    /// Builds a panel and derives the original threshold from the records.
    pub fn new(course_id: CourseId, mut records: Vec<ApplicantRecord>, seats: u32, trade: Trade) -> Self {
        records.sort_by_key(|r| r.applicant_id);
        let orig_threshold = seats_threshold(records.iter().map(|r| r.orig_total()), seats);
        CoursePanel { course_id, records, seats, trade, orig_threshold, sim_threshold: None }
    }

    /// Re-derives `orig_threshold` after sub-scores or seats change.
    pub fn refresh_threshold(&mut self) {
        self.orig_threshold = seats_threshold(self.records.iter().map(|r| r.orig_total()), self.seats);
    }
}

/// The seats-th highest score; the lowest score when seats exceed the
/// number of applicants.
pub fn seats_threshold(scores: impl Iterator<Item = i32>, seats: u32) -> i32 {
    let mut s: Vec<i32> = scores.collect();
    s.sort_unstable_by(|a, b| b.cmp(a));
    let idx = (seats.max(1) as usize).min(s.len()) - 1;
    s[idx]
}

/// Outcome column layout of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeColumns {
    pub name: String,
    pub has_followup2: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted by course id.
    pub panels: Vec<CoursePanel>,
    pub outcomes: Vec<OutcomeColumns>,
}

impl Dataset {
    pub fn records(&self) -> impl Iterator<Item = &ApplicantRecord> {
        self.panels.iter().flat_map(|p| p.records.iter())
    }

    pub fn n_records(&self) -> usize {
        self.panels.iter().map(|p| p.records.len()).sum()
    }

    pub fn has_outcome(&self, name: &str) -> bool {
        self.outcomes.iter().any(|o| o.name == name)
    }

    pub fn panel(&self, course: CourseId) -> Option<&CoursePanel> {
        self.panels.iter().find(|p| p.course_id == course)
    }
}

/// Which outcome to analyse and how.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OutcomeSpec {
    pub name: String,
    /// Follow-up minus baseline when set, follow-up level otherwise.
    pub differenced: bool,
    /// Name of another outcome that must be positive at the same follow-up
    /// wave for the record to be kept.
    pub conditional_filter: Option<String>,
    pub wave: Wave,
}

impl OutcomeSpec {
    pub fn differenced(name: &str) -> Self {
        OutcomeSpec { name: name.to_string(), differenced: true, conditional_filter: None, wave: Wave::FollowUp1 }
    }

    pub fn level(name: &str) -> Self {
        OutcomeSpec { differenced: false, ..Self::differenced(name) }
    }

    /// Baseline level, as used for balance checks.
    pub fn baseline(name: &str) -> Self {
        OutcomeSpec { wave: Wave::Baseline, ..Self::level(name) }
    }

    pub fn conditional_on(mut self, filter: &str) -> Self {
        self.conditional_filter = Some(filter.to_string());
        self
    }
}

/// Outcome values for every non-attrited record that passes the filter, in
/// panel order.
pub fn difference_outcome(panels: &[CoursePanel], spec: &OutcomeSpec) -> Result<Vec<(ApplicantId, f64)>, DatasetError> {
    let known: BTreeSet<&str> =
        panels.iter().flat_map(|p| p.records.iter()).flat_map(|r| r.outcomes.keys().map(String::as_str)).collect();
    if !known.contains(spec.name.as_str()) {
        return Err(DatasetError::UnknownOutcome(spec.name.clone()));
    }
    if let Some(f) = &spec.conditional_filter {
        if !known.contains(f.as_str()) {
            return Err(DatasetError::UnknownOutcome(f.clone()));
        }
    }
    let mut out = Vec::new();
    for r in panels.iter().flat_map(|p| p.records.iter()) {
        if r.attrited(spec.wave) {
            continue;
        }
        let Some(vals) = r.outcomes.get(&spec.name) else { continue };
        let Some(fu) = vals.at(spec.wave) else { continue };
        if let Some(f) = &spec.conditional_filter {
            let pass = r.outcomes.get(f).and_then(|v| v.at(spec.wave)).is_some_and(|v| v > 0.0);
            if !pass {
                continue;
            }
        }
        let value = if spec.differenced { fu - vals.baseline } else { fu };
        if value.is_finite() {
            out.push((r.applicant_id, value));
        }
    }
    Ok(out)
}

struct Row<'a> {
    line: u64,
    header: &'a [String],
    rec: &'a csv::StringRecord,
}

impl Row<'_> {
    fn cell(&self, col: &str) -> &str {
        let idx = self.header.iter().position(|h| h == col).expect("header validated");
        self.rec.get(idx).unwrap_or("").trim()
    }

    fn malformed(&self, col: &str, detail: impl Into<String>) -> DatasetError {
        DatasetError::MalformedCsv { row: self.line, column: col.to_string(), detail: detail.into() }
    }

    fn required<T: std::str::FromStr>(&self, col: &str) -> Result<T, DatasetError> {
        let s = self.cell(col);
        if s.is_empty() {
            return Err(self.malformed(col, "required value is missing"));
        }
        s.parse().map_err(|_| self.malformed(col, format!("cannot parse {s:?}")))
    }

    fn optional<T: std::str::FromStr>(&self, col: &str) -> Result<Option<T>, DatasetError> {
        let s = self.cell(col);
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| self.malformed(col, format!("cannot parse {s:?}")))
    }

    fn flag(&self, col: &str) -> Result<bool, DatasetError> {
        match self.cell(col) {
            "0" => Ok(false),
            "1" => Ok(true),
            "" => Err(self.malformed(col, "required value is missing")),
            other => Err(self.malformed(col, format!("expected 0 or 1, got {other:?}"))),
        }
    }

    fn token<T: Token>(&self, col: &str) -> Result<Option<T>, DatasetError> {
        let s = self.cell(col);
        if s.is_empty() {
            return Ok(None);
        }
        T::parse_token(&s.to_ascii_lowercase()).map(Some).ok_or_else(|| DatasetError::UnknownEnumValue {
            row: self.line,
            column: col.to_string(),
            value: s.to_string(),
        })
    }
}

fn outcome_layout(header: &[String]) -> Result<Vec<OutcomeColumns>, DatasetError> {
    let mut names: Vec<String> = Vec::new();
    for h in header.iter().skip(FIXED_COLUMNS.len()) {
        let stem = h
            .strip_suffix("_base")
            .or_else(|| h.strip_suffix("_fu1"))
            .or_else(|| h.strip_suffix("_fu2"))
            .ok_or_else(|| DatasetError::MalformedCsv {
                row: 1,
                column: h.clone(),
                detail: "outcome columns must end in _base, _fu1 or _fu2".into(),
            })?;
        if !names.iter().any(|n| n == stem) {
            names.push(stem.to_string());
        }
    }
    let has = |c: String| header.iter().any(|h| *h == c);
    names.sort();
    names
        .into_iter()
        .map(|name| {
            for suffix in ["_base", "_fu1"] {
                if !has(format!("{name}{suffix}")) {
                    return Err(DatasetError::MalformedCsv {
                        row: 1,
                        column: format!("{name}{suffix}"),
                        detail: "outcome column pair is incomplete".into(),
                    });
                }
            }
            let has_followup2 = has(format!("{name}_fu2"));
            Ok(OutcomeColumns { name, has_followup2 })
        })
        .collect()
}

fn parse_row(row: &Row<'_>, outcomes: &[OutcomeColumns]) -> Result<(ApplicantRecord, u32, Trade), DatasetError> {
    let mut subs = [0i32; 5];
    for (i, s) in subs.iter_mut().enumerate() {
        let col = format!("s{}", i + 1);
        *s = row.required(&col)?;
        if !(0..=SUBSCORE_MAX[i]).contains(s) {
            return Err(row.malformed(&col, format!("sub-score {s} outside 0..={}", SUBSCORE_MAX[i])));
        }
    }
    let special_group =
        SpecialGroups::parse(row.cell("special_group")).map_err(|value| DatasetError::UnknownEnumValue {
            row: row.line,
            column: "special_group".into(),
            value,
        })?;
    let trade: Trade = row.token("trade")?.ok_or_else(|| row.malformed("trade", "required value is missing"))?;
    let seats: u32 = row.required("seats")?;
    if seats == 0 {
        return Err(row.malformed("seats", "seats must be at least 1"));
    }
    let attrited_w1 = row.flag("attrited_w1")?;
    let attrited_w2 = row.flag("attrited_w2")?;

    let mut values = BTreeMap::new();
    for oc in outcomes {
        let base_col = format!("{}_base", oc.name);
        let baseline: f64 = row.required(&base_col)?;
        let fu1_col = format!("{}_fu1", oc.name);
        let followup: Option<f64> = row.optional(&fu1_col)?;
        if followup.is_none() != attrited_w1 {
            return Err(row.malformed(&fu1_col, "follow-up must be missing exactly when attrited_w1 = 1"));
        }
        let followup2 = if oc.has_followup2 {
            let col = format!("{}_fu2", oc.name);
            let v: Option<f64> = row.optional(&col)?;
            if v.is_none() != attrited_w2 {
                return Err(row.malformed(&col, "follow-up must be missing exactly when attrited_w2 = 1"));
            }
            v
        } else {
            None
        };
        values.insert(oc.name.clone(), OutcomeValues { baseline, followup, followup2 });
    }

    let rec = ApplicantRecord {
        applicant_id: row.required("applicant_id")?,
        course_id: row.required("course_id")?,
        cohort: row.optional("cohort")?,
        gender: row.token("gender")?,
        age: row.optional("age")?,
        caste: row.token("caste")?,
        special_group,
        education_level: row.token("education_level")?,
        trade_specific_education: row.optional("trade_specific_education")?,
        food_sufficiency: row.token("food_sufficiency")?,
        percap_income: row.optional("percap_income")?,
        district: Some(row.cell("district").to_string()).filter(|s| !s.is_empty()),
        orig_subscores: SubScores(subs),
        treated: row.flag("treated")?,
        outcomes: values,
        attrited_w1,
        attrited_w2,
    };
    if rec.percap_income.is_some_and(|v| v < 0.0) {
        return Err(row.malformed("percap_income", "income must be non-negative"));
    }
    Ok((rec, seats, trade))
}

/// Parses a panel CSV and groups it into courses.
pub fn load_panel<R: Read>(source: R) -> Result<Dataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(source);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DatasetError::MalformedCsv { row: 1, column: String::new(), detail: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for (i, col) in FIXED_COLUMNS.iter().enumerate() {
        if header.get(i).map(String::as_str) != Some(*col) {
            return Err(DatasetError::MalformedCsv {
                row: 1,
                column: col.to_string(),
                detail: format!("expected column {} to be {col:?}", i + 1),
            });
        }
    }
    let outcomes = outcome_layout(&header)?;

    let mut by_course: BTreeMap<CourseId, (Vec<ApplicantRecord>, u32, Trade)> = BTreeMap::new();
    let mut seen: HashSet<ApplicantId> = HashSet::new();
    for (i, result) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let rec = result.map_err(|e| DatasetError::MalformedCsv {
            row: e.position().map_or(line, |p| p.line()),
            column: String::new(),
            detail: e.to_string(),
        })?;
        let row = Row { line, header: &header, rec: &rec };
        let (record, seats, trade) = parse_row(&row, &outcomes)?;
        if !seen.insert(record.applicant_id) {
            return Err(DatasetError::DuplicateApplicantId(record.applicant_id));
        }
        let entry = by_course.entry(record.course_id).or_insert_with(|| (Vec::new(), seats, trade));
        if entry.1 != seats {
            return Err(row.malformed("seats", format!("course {} already has {} seats", record.course_id, entry.1)));
        }
        if entry.2 != trade {
            return Err(row.malformed("trade", format!("course {} already has trade {}", record.course_id, entry.2)));
        }
        entry.0.push(record);
    }

    let mut panels = Vec::with_capacity(by_course.len());
    for (course_id, (records, seats, trade)) in by_course {
        if records.len() < 2 {
            return Err(DatasetError::CourseTooSmall(course_id));
        }
        panels.push(CoursePanel::new(course_id, records, seats, trade));
    }
    Ok(Dataset { panels, outcomes })
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, |x| x.to_string())
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes a dataset in the layout `load_panel` reads.
pub fn write_panel<W: Write>(dataset: &Dataset, sink: W) -> Result<(), DatasetError> {
    let io = |e: csv::Error| DatasetError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for oc in &dataset.outcomes {
        header.push(format!("{}_base", oc.name));
        header.push(format!("{}_fu1", oc.name));
        if oc.has_followup2 {
            header.push(format!("{}_fu2", oc.name));
        }
    }
    w.write_record(&header).map_err(io)?;
    for p in &dataset.panels {
        for r in &p.records {
            let mut row = vec![
                r.applicant_id.to_string(),
                r.course_id.to_string(),
                opt(&r.cohort),
                p.seats.to_string(),
                p.trade.to_string(),
                opt(&r.gender),
                opt(&r.age),
                opt(&r.caste),
                r.special_group.render(),
                opt(&r.education_level),
                opt(&r.trade_specific_education),
                opt(&r.food_sufficiency),
                opt(&r.percap_income),
                opt(&r.district),
            ];
            row.extend(r.orig_subscores.0.iter().map(|s| s.to_string()));
            row.push(flag(r.treated).into());
            row.push(flag(r.attrited_w1).into());
            row.push(flag(r.attrited_w2).into());
            for oc in &dataset.outcomes {
                let v = r.outcomes.get(&oc.name);
                row.push(v.map_or_else(String::new, |v| v.baseline.to_string()));
                row.push(v.map_or_else(String::new, |v| opt(&v.followup)));
                if oc.has_followup2 {
                    row.push(v.map_or_else(String::new, |v| opt(&v.followup2)));
                }
            }
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| DatasetError::Io(e.to_string()))?;
    Ok(())
}
