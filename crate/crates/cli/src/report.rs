//! Consolidated JSON report.

use quasird_core::rdd::EstimateResult;
use serde::Serialize;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Metadata {
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ResultRow {
    pub estimator: String,
    pub outcome: String,
    pub bandwidth: Option<f64>,
    pub effect: Option<f64>,
    pub se: Option<f64>,
    pub f_stat: Option<f64>,
    pub n: Option<usize>,
    pub baseline_mean: Option<f64>,
    pub warnings: Vec<String>,
}

impl ResultRow {
    pub fn empty(estimator: &str, outcome: &str) -> Self {
        ResultRow {
            estimator: estimator.to_string(),
            outcome: outcome.to_string(),
            bandwidth: None,
            effect: None,
            se: None,
            f_stat: None,
            n: None,
            baseline_mean: None,
            warnings: Vec::new(),
        }
    }

    pub fn from_estimate(r: &EstimateResult, outcome: &str) -> Self {
        ResultRow {
            estimator: r.estimator.clone(),
            outcome: outcome.to_string(),
            bandwidth: r.bandwidth,
            effect: Some(r.effect),
            se: Some(r.se),
            f_stat: r.f_stat,
            n: Some(r.n),
            baseline_mean: Some(r.baseline_mean),
            warnings: r.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Report {
    pub metadata: Metadata,
    pub results: Vec<ResultRow>,
}

impl Report {
    pub fn new(command: &str, seed: Option<u64>, config_hash: String) -> Self {
        Report {
            metadata: Metadata {
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                seed,
                config_hash,
            },
            results: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}
