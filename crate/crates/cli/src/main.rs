//! `quasird`: command-line front end for the admission-rule discontinuity
//! toolkit.

mod commands;
mod config;
mod error;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use crate::commands::{run, Command, Outputs};
use crate::config::{RunConfig, Settings};
use crate::error::{io_error, CliError};
use crate::report::Report;

#[derive(Debug, Parser)]
#[command(name = "quasird", version, about = "Regression discontinuity and matching estimators for ranked admissions")]
struct Args {
    command: Command,
    /// INI configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Applicant panel CSV.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Reconstructed score table CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// District development table CSV replacing the bundled one.
    #[arg(long)]
    districts: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `original` or `reconstructed`.
    #[arg(long)]
    score_source: Option<String>,
    /// `name[:diff|:level][@filter][#1|#2]`; repeatable.
    #[arg(long)]
    outcome: Vec<String>,
    /// late, itt, hlate or hitt; repeatable.
    #[arg(long)]
    estimator: Vec<String>,
    /// Fixed bandwidth or `cv`.
    #[arg(long)]
    bandwidth: Option<String>,
    /// Comma-separated cross-validation grid.
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated bandwidths for `sweep`.
    #[arg(long)]
    bandwidths: Option<String>,
    #[arg(long)]
    subgroup: Option<String>,
    /// Balance covariates.
    #[arg(long)]
    covariates: Option<String>,
    /// Attrition regression controls.
    #[arg(long)]
    controls: Option<String>,
    #[arg(long)]
    fixed_effects: Option<String>,
    #[arg(long)]
    bin_width: Option<String>,
    /// Follow-up wave for attrition, 1 or 2.
    #[arg(long)]
    wave: Option<String>,
    /// Any `section.key=value` override.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Args {
    fn settings(&self) -> Result<Settings, CliError> {
        let mut s = match &self.config {
            Some(p) => Settings::from_ini(p)?,
            None => Settings::default(),
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("input.panel", path(&self.input)),
            ("input.scores", path(&self.scores)),
            ("input.districts", path(&self.districts)),
            ("run.out", path(&self.out)),
            ("estimate.score_source", self.score_source.clone()),
            ("estimate.outcomes", (!self.outcome.is_empty()).then(|| self.outcome.join(","))),
            ("estimate.estimators", (!self.estimator.is_empty()).then(|| self.estimator.join(","))),
            ("estimate.bandwidth", self.bandwidth.clone()),
            ("estimate.grid", self.grid.clone()),
            ("estimate.bandwidths", self.bandwidths.clone()),
            ("estimate.subgroup", self.subgroup.clone()),
            ("diagnostics.covariates", self.covariates.clone()),
            ("diagnostics.controls", self.controls.clone()),
            ("diagnostics.fixed_effects", self.fixed_effects.clone()),
            ("diagnostics.bin_width", self.bin_width.clone()),
            ("diagnostics.wave", self.wave.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                s.set(k, &v);
            }
        }
        if let Some(seed) = self.seed {
            s.set("run.seed", &seed.to_string());
            if self.command == Command::Synth || s.has_section("synth") {
                s.set("synth.seed", &seed.to_string());
            }
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .filter(|(k, _)| k.contains('.'))
                .ok_or_else(|| CliError::Config(format!("--set expects section.key=value, got {o:?}")))?;
            s.set(k.trim(), v.trim());
        }
        Ok(s)
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("QUASIRD_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("QUASIRD_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn write_outputs(dir: &Path, outputs: &Outputs, report: &Report) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| io_error(&p, e))
    };
    for (name, bytes) in &outputs.artifacts {
        write(name, bytes)?;
    }
    write("report.json", report.to_json().as_bytes())
}

fn execute(args: &Args) -> Result<Vec<String>, CliError> {
    configure_threads()?;
    let settings = args.settings()?;
    let cfg = RunConfig::resolve(&settings)?;
    let hash = settings.hash(args.command.name())?;
    let outputs = run(args.command, &cfg)?;
    let mut report = Report::new(args.command.name(), cfg.seed, hash);
    report.results = outputs.results.clone();
    write_outputs(&cfg.out, &outputs, &report)?;
    Ok(outputs.warnings)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(warnings) => {
            for w in warnings {
                eprintln!("WARN {w}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ERROR {} {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
