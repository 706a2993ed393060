#![allow(dead_code)]

use std::collections::BTreeMap;

use quasird_core::dataset::{ApplicantRecord, CoursePanel, OutcomeValues, SpecialGroups, SubScores, Trade};
use quasird_core::synth::SynthConfig;

pub fn record(id: u64, course: i64, subscores: [i32; 5], treated: bool) -> ApplicantRecord {
    ApplicantRecord {
        applicant_id: id,
        course_id: course,
        cohort: None,
        gender: None,
        age: None,
        caste: None,
        special_group: SpecialGroups::empty(),
        education_level: None,
        trade_specific_education: None,
        food_sufficiency: None,
        percap_income: None,
        district: None,
        orig_subscores: SubScores(subscores),
        treated,
        outcomes: BTreeMap::new(),
        attrited_w1: false,
        attrited_w2: false,
    }
}

pub fn with_outcome(mut r: ApplicantRecord, name: &str, baseline: f64, followup: Option<f64>) -> ApplicantRecord {
    r.attrited_w1 = followup.is_none();
    r.outcomes.insert(name.to_string(), OutcomeValues { baseline, followup, followup2: None });
    r
}

pub fn panels_from(records: Vec<ApplicantRecord>, seats: u32) -> Vec<CoursePanel> {
    let mut by_course: BTreeMap<i64, Vec<ApplicantRecord>> = BTreeMap::new();
    for r in records {
        by_course.entry(r.course_id).or_default().push(r);
    }
    by_course.into_iter().map(|(c, rs)| CoursePanel::new(c, rs, seats, Trade::Farming)).collect()
}

pub fn small(seed: u64, n_courses: usize) -> SynthConfig {
    SynthConfig { seed, n_courses, ..SynthConfig::default() }
}
