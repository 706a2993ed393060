//! Run configuration: INI file values overlaid with command-line flags.
//!
//! Settings are flattened to `section.key` strings first, so the merged
//! view can be hashed and reported before it is interpreted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use quasird_core::covariates::{Covariate, FixedEffect};
use quasird_core::dataset::{OutcomeSpec, Wave};
use quasird_core::psm::{TreatmentIndicator, DEFAULT_NEIGHBOURS, DEFAULT_TRIM};
use quasird_core::rdd::{Estimator, Subgroup};
use quasird_core::synth::SynthConfig;
use quasird_core::threshold::ScoreSource;
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliError};

/// Keys naming files or directories; their contents, not their names,
/// enter the configuration hash.
const PATH_KEYS: [&str; 4] = ["input.panel", "input.scores", "input.districts", "run.out"];

pub const DEFAULT_SWEEP: [f64; 5] = [2.0, 3.0, 4.0, 5.0, 10.0];
pub const DEFAULT_BALANCE: [&str; 6] =
    ["female", "age", "education", "trade_specific_education", "percap_income", "special_group"];
pub const DEFAULT_CONTROLS: [&str; 2] = ["age", "education"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn from_ini(path: &Path) -> Result<Self, CliError> {
        let ini = ini::Ini::load_from_file(path).map_err(|e| io_error(path, e))?;
        let mut s = Settings::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(CliError::Config(format!("key {k:?} outside any section")));
                }
                continue;
            };
            for (k, v) in props.iter() {
                s.set(&format!("{}.{}", section.trim(), k.trim()), v.trim());
            }
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn section(&self, name: &str) -> impl Iterator<Item = (&str, &str)> {
        let prefix = format!("{name}.");
        self.0.iter().filter_map(move |(k, v)| k.strip_prefix(&prefix).map(|k| (k, v.as_str())))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.section(name).next().is_some()
    }

    /// SHA-256 over the non-path settings, the command, and the digests of
    /// the input files.
    pub fn hash(&self, command: &str) -> Result<String, CliError> {
        let mut h = Sha256::new();
        h.update(format!("command={command}\n"));
        for (k, v) in &self.0 {
            if !PATH_KEYS.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n"));
            }
        }
        for key in ["input.panel", "input.scores", "input.districts"] {
            if let Some(p) = self.get(key) {
                let bytes = std::fs::read(p).map_err(|e| io_error(Path::new(p), e))?;
                h.update(format!("{key}#sha256={}\n", hex::encode(Sha256::digest(&bytes))));
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// Cross-validated over the given grid, or the default grid.
    Cv(Option<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsmSettings {
    pub covariates: Vec<Covariate>,
    pub fixed_effects: Vec<FixedEffect>,
    pub treatment: TreatmentIndicator,
    pub trim: (f64, f64),
    pub neighbours: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub panel: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub districts: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub score_source: ScoreSource,
    /// Empty means every outcome in the panel, differenced.
    pub outcomes: Vec<OutcomeSpec>,
    pub estimators: Vec<Estimator>,
    pub bandwidth: BandwidthPolicy,
    pub sweep: Vec<f64>,
    pub subgroup: Option<Subgroup>,
    pub balance: Vec<Covariate>,
    pub controls: Vec<Covariate>,
    pub fixed_effects: Vec<FixedEffect>,
    pub bin_width: f64,
    /// Follow-up wave for the attrition regression.
    pub wave: Wave,
    pub psm: PsmSettings,
    /// Whether `report` also runs the matching estimators.
    pub psm_in_report: bool,
    /// Present when the run generates its own data.
    pub synth: Option<SynthConfig>,
}

fn list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim().parse().map_err(|_| CliError::Config(format!("{key}: cannot parse {v:?}")))
}

fn num_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    list(v).map(|x| num(key, x)).collect()
}

/// Parses `name[:diff|:level][@filter][#wave]`.
pub fn parse_outcome(s: &str) -> Result<OutcomeSpec, CliError> {
    let bad = || CliError::Config(format!("outcome {s:?}: expected name[:diff|:level][@filter][#1|#2]"));
    let (rest, wave) = match s.split_once('#') {
        Some((r, "1")) => (r, Wave::FollowUp1),
        Some((r, "2")) => (r, Wave::FollowUp2),
        Some(_) => return Err(bad()),
        None => (s, Wave::FollowUp1),
    };
    let (rest, filter) = match rest.split_once('@') {
        Some((r, f)) if !f.is_empty() => (r, Some(f)),
        Some(_) => return Err(bad()),
        None => (rest, None),
    };
    let mut spec = match rest.split_once(':') {
        Some((n, "diff")) => OutcomeSpec::differenced(n),
        Some((n, "level")) => OutcomeSpec::level(n),
        Some(_) => return Err(bad()),
        None => OutcomeSpec::differenced(rest),
    };
    if spec.name.is_empty() {
        return Err(bad());
    }
    if let Some(f) = filter {
        spec = spec.conditional_on(f);
    }
    spec.wave = wave;
    Ok(spec)
}

/// Inverse of `parse_outcome`, used as the outcome label in artifacts.
pub fn outcome_label(spec: &OutcomeSpec) -> String {
    let mut s = spec.name.clone();
    if !spec.differenced {
        s.push_str(":level");
    }
    if let Some(f) = &spec.conditional_filter {
        s.push('@');
        s.push_str(f);
    }
    if spec.wave == Wave::FollowUp2 {
        s.push_str("#2");
    }
    s
}

fn covariates(key: &str, v: &str) -> Result<Vec<Covariate>, CliError> {
    list(v).map(|c| Covariate::parse(c).ok_or_else(|| CliError::Config(format!("{key}: unknown covariate {c:?}")))).collect()
}

fn fixed_effects(key: &str, v: &str) -> Result<Vec<FixedEffect>, CliError> {
    list(v)
        .map(|c| FixedEffect::parse(c).ok_or_else(|| CliError::Config(format!("{key}: unknown fixed effect {c:?}"))))
        .collect()
}

impl RunConfig {
    pub fn resolve(s: &Settings) -> Result<Self, CliError> {
        let path = |k: &str| s.get(k).map(PathBuf::from);
        let score_source = match s.get("estimate.score_source") {
            Some(v) => ScoreSource::parse(v).ok_or_else(|| CliError::Config(format!("unknown score source {v:?}")))?,
            None => ScoreSource::default(),
        };
        let outcomes = match s.get("estimate.outcomes") {
            Some(v) => list(v).map(parse_outcome).collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        let estimators = match s.get("estimate.estimators") {
            Some(v) => list(v)
                .map(|e| Estimator::parse(e).ok_or_else(|| CliError::Config(format!("unknown estimator {e:?}"))))
                .collect::<Result<_, _>>()?,
            None => vec![Estimator::Late],
        };
        let grid = s.get("estimate.grid").map(|v| num_list("estimate.grid", v)).transpose()?;
        let bandwidth = match s.get("estimate.bandwidth") {
            None | Some("cv") => BandwidthPolicy::Cv(grid),
            Some(v) => {
                let h: f64 = num("estimate.bandwidth", v)?;
                if !(h > 0.0) {
                    return Err(CliError::Config(format!("bandwidth must be positive, got {v}")));
                }
                BandwidthPolicy::Fixed(h)
            }
        };
        let sweep = match s.get("estimate.bandwidths") {
            Some(v) => num_list("estimate.bandwidths", v)?,
            None => DEFAULT_SWEEP.to_vec(),
        };
        let subgroup = s
            .get("estimate.subgroup")
            .map(|v| Subgroup::parse(v).ok_or_else(|| CliError::Config(format!("unknown subgroup {v:?}"))))
            .transpose()?;
        if estimators.iter().any(|e| e.is_heterogeneous()) && subgroup.is_none() {
            return Err(CliError::Config("heterogeneous estimators need estimate.subgroup".into()));
        }
        let wave = match s.get("diagnostics.wave") {
            None | Some("1") => Wave::FollowUp1,
            Some("2") => Wave::FollowUp2,
            Some(v) => return Err(CliError::Config(format!("diagnostics.wave must be 1 or 2, got {v:?}"))),
        };

        let balance = covariates("diagnostics.covariates", s.get("diagnostics.covariates").unwrap_or(&DEFAULT_BALANCE.join(",")))?;
        let controls = covariates("diagnostics.controls", s.get("diagnostics.controls").unwrap_or(&DEFAULT_CONTROLS.join(",")))?;
        let fes = fixed_effects("diagnostics.fixed_effects", s.get("diagnostics.fixed_effects").unwrap_or(""))?;
        let bin_width: f64 = s.get("diagnostics.bin_width").map_or(Ok(1.0), |v| num("diagnostics.bin_width", v))?;
        if !(bin_width > 0.0) {
            return Err(CliError::Config("diagnostics.bin_width must be positive".into()));
        }

        let trim = match s.get("psm.trim") {
            Some(v) => match num_list("psm.trim", v)?.as_slice() {
                [lo, hi] => (*lo, *hi),
                _ => return Err(CliError::Config("psm.trim needs two values".into())),
            },
            None => DEFAULT_TRIM,
        };
        let psm = PsmSettings {
            covariates: covariates("psm.covariates", s.get("psm.covariates").unwrap_or(&DEFAULT_BALANCE.join(",")))?,
            fixed_effects: fixed_effects("psm.fixed_effects", s.get("psm.fixed_effects").unwrap_or(""))?,
            treatment: match s.get("psm.treatment") {
                Some(v) => TreatmentIndicator::parse(v).ok_or_else(|| CliError::Config(format!("unknown treatment {v:?}")))?,
                None => TreatmentIndicator::default(),
            },
            trim,
            neighbours: s.get("psm.neighbours").map_or(Ok(DEFAULT_NEIGHBOURS), |v| num("psm.neighbours", v))?,
        };

        let synth = if s.has_section("synth") {
            let mut cfg = SynthConfig::default();
            let mut seeded = false;
            for (k, v) in s.section("synth") {
                cfg.set(k, v)?;
                seeded |= k == "seed";
            }
            if !seeded {
                return Err(CliError::Config("synth.seed is required".into()));
            }
            cfg.validate()?;
            Some(cfg)
        } else {
            None
        };
        let seed = match s.get("run.seed") {
            Some(v) => Some(num("run.seed", v)?),
            None => synth.as_ref().map(|c| c.seed),
        };

        Ok(RunConfig {
            panel: path("input.panel"),
            scores: path("input.scores"),
            districts: path("input.districts"),
            out: path("run.out").unwrap_or_else(|| PathBuf::from("out")),
            seed,
            score_source,
            outcomes,
            estimators,
            bandwidth,
            sweep,
            subgroup,
            balance,
            controls,
            fixed_effects: fes,
            bin_width,
            wave,
            psm,
            psm_in_report: s.has_section("psm"),
            synth,
        })
    }
}
