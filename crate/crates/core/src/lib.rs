//! Fuzzy regression-discontinuity toolkit for course-level admissions
//! decided by ranking scores.

pub mod dataset;
pub mod regression;
pub mod scoring;
pub mod covariates;
pub mod threshold;
pub mod rdd;
pub mod bandwidth;
pub mod diagnostics;
pub mod psm;
pub mod synth;
