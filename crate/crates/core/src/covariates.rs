//! Named baseline covariates and categorical fixed effects, with the
//! missing-value indicator treatment used by the balance, attrition and
//! propensity regressions.

use std::collections::BTreeMap;
use std::fmt;

use crate::dataset::{ApplicantRecord, Caste, CoursePanel, FoodSufficiency, Gender, Token};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Covariate {
    Female,
    Age,
    Caste(Caste),
    SpecialGroupAny,
    Education,
    TradeSpecificEducation,
    PercapIncome,
    Food(FoodSufficiency),
    /// Baseline value of a named outcome.
    Baseline(String),
}

impl Covariate {
    /// Parses `female`, `age`, `caste:<token>`, `special_group`,
    /// `education`, `trade_specific_education`, `percap_income`,
    /// `food:<token>`; any other name refers to an outcome's baseline.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        Some(match s {
            "" => return None,
            "female" => Covariate::Female,
            "age" => Covariate::Age,
            "special_group" => Covariate::SpecialGroupAny,
            "education" | "education_level" => Covariate::Education,
            "trade_specific_education" => Covariate::TradeSpecificEducation,
            "percap_income" => Covariate::PercapIncome,
            _ => {
                if let Some(c) = s.strip_prefix("caste:") {
                    Covariate::Caste(Caste::parse_token(c)?)
                } else if let Some(f) = s.strip_prefix("food:") {
                    Covariate::Food(FoodSufficiency::parse_token(f)?)
                } else {
                    Covariate::Baseline(s.strip_prefix("baseline:").unwrap_or(s).to_string())
                }
            }
        })
    }

    pub fn value(&self, r: &ApplicantRecord) -> Option<f64> {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        match self {
            Covariate::Female => r.gender.map(|g| b(g == Gender::Female)),
            Covariate::Age => r.age,
            Covariate::Caste(c) => r.caste.map(|v| b(v == *c)),
            Covariate::SpecialGroupAny => Some(b(!r.special_group.is_empty())),
            Covariate::Education => r.education_level.map(|e| e.ordinal() as f64),
            Covariate::TradeSpecificEducation => r.trade_specific_education.map(f64::from),
            Covariate::PercapIncome => r.percap_income,
            Covariate::Food(f) => r.food_sufficiency.map(|v| b(v == *f)),
            Covariate::Baseline(name) => r.outcomes.get(name).map(|o| o.baseline),
        }
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Covariate::Female => f.write_str("female"),
            Covariate::Age => f.write_str("age"),
            Covariate::Caste(c) => write!(f, "caste:{c}"),
            Covariate::SpecialGroupAny => f.write_str("special_group"),
            Covariate::Education => f.write_str("education"),
            Covariate::TradeSpecificEducation => f.write_str("trade_specific_education"),
            Covariate::PercapIncome => f.write_str("percap_income"),
            Covariate::Food(v) => write!(f, "food:{v}"),
            Covariate::Baseline(name) => f.write_str(name),
        }
    }
}

/// Categorical grouping absorbed by indicator columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FixedEffect {
    Course,
    District,
    Trade,
    Cohort,
}

impl FixedEffect {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "course" => Some(FixedEffect::Course),
            "district" => Some(FixedEffect::District),
            "trade" => Some(FixedEffect::Trade),
            "cohort" => Some(FixedEffect::Cohort),
            _ => None,
        }
    }

    fn level(&self, p: &CoursePanel, r: &ApplicantRecord) -> String {
        match self {
            FixedEffect::Course => p.course_id.to_string(),
            FixedEffect::District => r.district.clone().unwrap_or_default(),
            FixedEffect::Trade => p.trade.to_string(),
            FixedEffect::Cohort => r.cohort.map(|c| c.to_string()).unwrap_or_default(),
        }
    }
}

impl fmt::Display for FixedEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FixedEffect::Course => "course",
            FixedEffect::District => "district",
            FixedEffect::Trade => "trade",
            FixedEffect::Cohort => "cohort",
        })
    }
}

/// Named columns built for a list of records.
#[derive(Debug, Clone, Default)]
pub struct Columns {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Columns {
    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.names.push(name.into());
        self.values.push(values);
    }

    pub fn extend(&mut self, other: Columns) {
        self.names.extend(other.names);
        self.values.extend(other.values);
    }
}

/// Covariate columns with missing values set to zero, each followed by a
/// `<name>_missing` indicator when at least one value is missing.
pub fn covariate_columns(rows: &[(&CoursePanel, &ApplicantRecord)], covariates: &[Covariate]) -> Columns {
    let mut out = Columns::default();
    for c in covariates {
        let raw: Vec<Option<f64>> = rows.iter().map(|(_, r)| c.value(r)).collect();
        out.push(c.to_string(), raw.iter().map(|v| v.unwrap_or(0.0)).collect());
        if raw.iter().any(Option::is_none) {
            out.push(format!("{c}_missing"), raw.iter().map(|v| if v.is_none() { 1.0 } else { 0.0 }).collect());
        }
    }
    out
}

/// Indicator columns for every level but the first (in sorted order).
pub fn fixed_effect_columns(rows: &[(&CoursePanel, &ApplicantRecord)], effects: &[FixedEffect]) -> Columns {
    let mut out = Columns::default();
    for fe in effects {
        let levels: Vec<String> = rows.iter().map(|(p, r)| fe.level(p, r)).collect();
        let mut distinct: BTreeMap<&str, ()> = BTreeMap::new();
        for l in &levels {
            distinct.insert(l, ());
        }
        for level in distinct.keys().skip(1) {
            out.push(
                format!("{fe}={level}"),
                levels.iter().map(|l| if l == level { 1.0 } else { 0.0 }).collect(),
            );
        }
    }
    out
}
