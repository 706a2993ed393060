use quasird_core::bandwidth::BandwidthError;
use quasird_core::dataset::DatasetError;
use quasird_core::diagnostics::DiagnosticsError;
use quasird_core::psm::PsmError;
use quasird_core::rdd::RddError;
use quasird_core::regression::RegressionError;
use quasird_core::scoring::ScoringError;
use quasird_core::synth::SynthError;
use quasird_core::threshold::ThresholdError;
use thiserror::Error;

pub const EXIT_DATA: i32 = 2;
pub const EXIT_ESTIMATION: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error(transparent)]
    Rdd(#[from] RddError),
    #[error(transparent)]
    Bandwidth(#[from] BandwidthError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Psm(#[from] PsmError),
}

/// Snake-case name of the outermost variant in a `Debug` rendering.
fn variant_code<T: std::fmt::Debug>(e: &T) -> String {
    let debug = format!("{e:?}");
    let name: String = debug.chars().take_while(|c| c.is_ascii_alphanumeric()).collect();
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

enum Root<'a> {
    Data(String),
    Estimation(String),
    Regression(&'a RegressionError),
}

impl CliError {
    fn root(&self) -> Root<'_> {
        match self {
            CliError::Config(_) => Root::Data("config".into()),
            CliError::Io { .. } => Root::Data("io".into()),
            CliError::Dataset(e) => Root::Data(variant_code(e)),
            CliError::Synth(SynthError::Scoring(ScoringError::Regression(r))) => Root::Regression(r),
            CliError::Synth(SynthError::Scoring(e)) => Root::Data(variant_code(e)),
            CliError::Synth(e) => Root::Data(variant_code(e)),
            CliError::Scoring(ScoringError::Regression(r)) => Root::Regression(r),
            CliError::Scoring(e) => Root::Data(variant_code(e)),
            CliError::Rdd(e) => rdd_root(e),
            CliError::Diagnostics(DiagnosticsError::Rdd(e)) => rdd_root(e),
            CliError::Diagnostics(DiagnosticsError::Regression(r)) => Root::Regression(r),
            CliError::Psm(PsmError::Dataset(e)) => Root::Data(variant_code(e)),
            CliError::Psm(PsmError::Regression(r)) => Root::Regression(r),
            CliError::Threshold(e) => Root::Estimation(variant_code(e)),
            CliError::Bandwidth(e) => Root::Estimation(variant_code(e)),
            CliError::Diagnostics(e) => Root::Estimation(variant_code(e)),
            CliError::Psm(e) => Root::Estimation(variant_code(e)),
        }
    }

    pub fn code(&self) -> String {
        match self.root() {
            Root::Data(c) | Root::Estimation(c) => c,
            Root::Regression(r) => variant_code(r),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Root::Data(_) => EXIT_DATA,
            Root::Estimation(_) | Root::Regression(_) => EXIT_ESTIMATION,
        }
    }
}

fn rdd_root(e: &RddError) -> Root<'_> {
    match e {
        RddError::Dataset(d) => Root::Data(variant_code(d)),
        RddError::Regression(r) => Root::Regression(r),
        other => Root::Estimation(variant_code(other)),
    }
}

pub fn io_error(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io { path: path.display().to_string(), detail: e.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_exit_status() {
        let e = CliError::Dataset(DatasetError::UnknownEnumValue { row: 3, column: "caste".into(), value: "x".into() });
        assert_eq!(e.code(), "unknown_enum_value");
        assert_eq!(e.exit_code(), EXIT_DATA);
        let e = CliError::Rdd(RddError::Regression(RegressionError::SingularAfterDrop));
        assert_eq!(e.code(), "singular_after_drop");
        assert_eq!(e.exit_code(), EXIT_ESTIMATION);
        let e = CliError::Rdd(RddError::Dataset(DatasetError::UnknownOutcome("y".into())));
        assert_eq!(e.exit_code(), EXIT_DATA);
    }
}
