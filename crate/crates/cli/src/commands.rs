//! Command implementations. Each command computes into an in-memory
//! `Outputs`; files are written afterwards by a single writer.

use std::fs::File;
use std::io::BufReader;

use quasird_core::bandwidth::{cross_validate, default_grid, CvProfile};
use quasird_core::dataset::{load_panel, write_panel, Dataset, OutcomeSpec};
use quasird_core::diagnostics::{
    attrition_regression, balance_table, density_sample, density_test, write_balance_csv,
};
use quasird_core::psm::{fit_propensity, ipsw_did, naive_did, nn_did, PropensitySpec, TreatmentIndicator};
use quasird_core::rdd::{bandwidth_sweep, estimate, outcome_map, Estimator, RddSpec};
use quasird_core::scoring::{reconstruct, DistrictTable, ScoreTable};
use quasird_core::synth::{generate_full, SynthGroundTruth};
use quasird_core::threshold::{
    pooled_first_stage_probability, simulate_all, write_threshold_csv, Forcing, ScoreSource,
};

use crate::config::{outcome_label, BandwidthPolicy, RunConfig};
use crate::error::{io_error, CliError};
use crate::report::ResultRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Validate,
    Score,
    Thresholds,
    Estimate,
    Balance,
    Density,
    Attrition,
    CvBandwidth,
    Sweep,
    Psm,
    Synth,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Score => "score",
            Command::Thresholds => "thresholds",
            Command::Estimate => "estimate",
            Command::Balance => "balance",
            Command::Density => "density",
            Command::Attrition => "attrition",
            Command::CvBandwidth => "cv-bandwidth",
            Command::Sweep => "sweep",
            Command::Psm => "psm",
            Command::Synth => "synth",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Default)]
pub struct Outputs {
    /// `(file name, contents)` in the order produced.
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub results: Vec<ResultRow>,
    pub warnings: Vec<String>,
}

impl Outputs {
    fn csv(&mut self, name: String, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write(&mut buf).map_err(|e| io_error(std::path::Path::new(&name), e))?;
        self.artifacts.push((name, buf));
        Ok(())
    }
}

struct Data {
    dataset: Dataset,
    table: DistrictTable,
    scores: Option<ScoreTable>,
    truth: Option<SynthGroundTruth>,
}

fn open(path: &std::path::Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| io_error(path, e))
}

fn district_table(cfg: &RunConfig) -> Result<DistrictTable, CliError> {
    match &cfg.districts {
        Some(p) => Ok(DistrictTable::from_csv(open(p)?)?),
        None => Ok(DistrictTable::bundled()),
    }
}

fn load(cfg: &RunConfig) -> Result<Data, CliError> {
    let table = district_table(cfg)?;
    let (dataset, scores, truth) = match (&cfg.panel, &cfg.synth) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config("give either an input panel or a synth configuration, not both".into()))
        }
        (None, None) => return Err(CliError::Config("no input panel given (--in or input.panel)".into())),
        (Some(p), None) => (load_panel(open(p)?)?, None, None),
        (None, Some(sc)) => {
            let out = generate_full(sc)?;
            (out.dataset, Some(out.scores), Some(out.truth))
        }
    };
    let scores = match &cfg.scores {
        Some(p) => Some(ScoreTable::read_csv(open(p)?, &dataset.panels)?),
        None => scores,
    };
    Ok(Data { dataset, table, scores, truth })
}

impl Data {
    fn scores(&mut self) -> Result<&ScoreTable, CliError> {
        if self.scores.is_none() {
            self.scores = Some(reconstruct(&self.dataset.panels, &self.table)?);
        }
        Ok(self.scores.as_ref().expect("just filled"))
    }

    fn forcing(&mut self, source: ScoreSource, out: &mut Outputs) -> Result<Forcing, CliError> {
        let forcing = match source {
            ScoreSource::Original => Forcing::original(&self.dataset.panels),
            ScoreSource::Reconstructed => {
                self.scores()?;
                Forcing::reconstructed(&self.dataset.panels, self.scores.as_ref().expect("filled")).0
            }
        };
        for (c, e) in &forcing.excluded {
            out.warnings.push(format!("course {c} excluded: {e}"));
        }
        Ok(forcing)
    }

    fn outcomes(&self, cfg: &RunConfig) -> Vec<OutcomeSpec> {
        if cfg.outcomes.is_empty() {
            self.dataset.outcomes.iter().map(|o| OutcomeSpec::differenced(&o.name)).collect()
        } else {
            cfg.outcomes.clone()
        }
    }
}

fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

fn cv_profile(data: &Data, forcing: &Forcing, spec: &OutcomeSpec, grid: Option<&Vec<f64>>) -> Result<CvProfile, CliError> {
    let values = outcome_map(&data.dataset.panels, spec)?;
    let grid = match grid {
        Some(g) => g.clone(),
        None => {
            let rel: Vec<f64> = data
                .dataset
                .records()
                .filter(|r| values.contains_key(&r.applicant_id))
                .filter_map(|r| forcing.get(r.applicant_id).map(|p| p.relative))
                .collect();
            default_grid(&rel)
        }
    };
    Ok(cross_validate(&data.dataset.panels, forcing, &outcome_label(spec), &values, &grid)?)
}

/// Bandwidth per outcome, writing CV profiles when cross-validating.
fn bandwidths(
    data: &Data,
    forcing: &Forcing,
    cfg: &RunConfig,
    outcomes: &[OutcomeSpec],
    out: &mut Outputs,
) -> Result<Vec<f64>, CliError> {
    outcomes
        .iter()
        .map(|o| match &cfg.bandwidth {
            BandwidthPolicy::Fixed(h) => Ok(*h),
            BandwidthPolicy::Cv(grid) => {
                let profile = cv_profile(data, forcing, o, grid.as_ref())?;
                out.csv(format!("cv_{}.csv", file_stem(&outcome_label(o))), |w| profile.write_csv(w))?;
                Ok(profile.chosen)
            }
        })
        .collect()
}

fn rdd_spec(cfg: &RunConfig, outcome: &OutcomeSpec, h: f64, estimator: Estimator) -> RddSpec {
    let spec = RddSpec::new(outcome.clone(), h, cfg.score_source, estimator);
    match (estimator.is_heterogeneous(), cfg.subgroup) {
        (true, Some(g)) => spec.with_subgroup(g),
        _ => spec,
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn run_validate(data: &Data, out: &mut Outputs) -> Result<(), CliError> {
    for r in data.dataset.records() {
        for (k, v) in r.orig_subscores.support_violations() {
            out.warnings.push(format!("applicant {}: s{} = {v} is off the rubric support", r.applicant_id, k + 1));
        }
    }
    let panels = &data.dataset.panels;
    out.csv("validation.csv".into(), |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["course_id", "n_records", "seats", "orig_threshold", "n_treated"])?;
        for p in panels {
            w.write_record([
                p.course_id.to_string(),
                p.records.len().to_string(),
                p.seats.to_string(),
                p.orig_threshold.to_string(),
                p.records.iter().filter(|r| r.treated).count().to_string(),
            ])?;
        }
        w.flush()
    })
}

fn csv_writer(buf: &mut Vec<u8>) -> csv::Writer<&mut Vec<u8>> {
    csv::Writer::from_writer(buf)
}

fn run_score(data: &mut Data, out: &mut Outputs) -> Result<(), CliError> {
    let scores = data.scores()?.clone();
    out.warnings.extend(scores.notes.iter().cloned());
    out.csv("scores.csv".into(), |w| scores.write_csv(w))
}

fn run_thresholds(data: &mut Data, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    data.scores()?;
    let scores = data.scores.as_ref().expect("filled");
    let run = simulate_all(&data.dataset.panels, scores);
    for (c, e) in &run.failed {
        out.warnings.push(format!("course {c} excluded: {e}"));
    }
    out.csv("thresholds.csv".into(), |w| write_threshold_csv(&run, w))?;
    let forcing = Forcing::from_run(&data.dataset.panels, scores, &run);
    let bins = pooled_first_stage_probability(&data.dataset.panels, &forcing, cfg.bin_width);
    out.csv("first_stage.csv".into(), |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["center", "mean_treated", "count"])?;
        for b in &bins {
            w.write_record([b.center.to_string(), b.mean_treated.to_string(), b.count.to_string()])?;
        }
        w.flush()
    })
}

fn run_estimate(data: &mut Data, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let forcing = data.forcing(cfg.score_source, out)?;
    let outcomes = data.outcomes(cfg);
    let hs = bandwidths(data, &forcing, cfg, &outcomes, out)?;
    let mut rows = Vec::new();
    for (o, &h) in outcomes.iter().zip(&hs) {
        for &e in &cfg.estimators {
            let res = estimate(&data.dataset.panels, &forcing, &rdd_spec(cfg, o, h, e))?;
            rows.push((outcome_label(o), res));
        }
    }
    out.csv("estimates.csv".into(), |buf| {
        let mut w = csv_writer(buf);
        w.write_record([
            "estimator",
            "outcome",
            "score_source",
            "bandwidth",
            "effect",
            "se",
            "first_stage",
            "f_stat",
            "n",
            "n_clusters",
            "baseline_mean",
            "subgroup",
            "group_effect",
            "group_se",
            "rest_effect",
            "rest_se",
        ])?;
        for (label, r) in &rows {
            let g = r.subgroup_effects.as_ref();
            w.write_record([
                r.estimator.clone(),
                label.clone(),
                cfg.score_source.as_str().to_string(),
                opt(r.bandwidth),
                r.effect.to_string(),
                r.se.to_string(),
                opt(r.first_stage_coef),
                opt(r.f_stat),
                r.n.to_string(),
                r.n_clusters.to_string(),
                r.baseline_mean.to_string(),
                opt(g.map(|g| g.label.clone())),
                opt(g.map(|g| g.group.effect)),
                opt(g.map(|g| g.group.se)),
                opt(g.map(|g| g.rest.effect)),
                opt(g.map(|g| g.rest.se)),
            ])?;
        }
        w.flush()
    })?;
    out.results.extend(rows.iter().map(|(label, r)| ResultRow::from_estimate(r, label)));
    Ok(())
}

fn run_balance(data: &mut Data, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let forcing = data.forcing(cfg.score_source, out)?;
    let h = match &cfg.bandwidth {
        BandwidthPolicy::Fixed(h) => *h,
        BandwidthPolicy::Cv(_) => {
            let outcomes = data.outcomes(cfg);
            let first = outcomes.first().ok_or_else(|| CliError::Config("no outcome to choose a bandwidth".into()))?;
            bandwidths(data, &forcing, cfg, std::slice::from_ref(first), out)?[0]
        }
    };
    let rows = balance_table(&data.dataset.panels, &forcing, &cfg.balance, h, cfg.score_source);
    out.csv("balance.csv".into(), |w| write_balance_csv(&rows, w))?;
    for r in &rows {
        for (name, res, stars) in [("balance_late", &r.late, r.late_stars()), ("balance_itt", &r.itt, r.itt_stars())] {
            let mut row = ResultRow::empty(name, &r.variable);
            row.bandwidth = Some(h);
            match res {
                Ok(e) => {
                    row.effect = Some(e.effect);
                    row.se = Some(e.se);
                    if !stars.is_empty() {
                        row.warnings.push(format!("discontinuity significant ({stars})"));
                    }
                }
                Err(e) => row.warnings.push(e.to_string()),
            }
            out.results.push(row);
        }
    }
    Ok(())
}

fn run_density(data: &mut Data, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let forcing = data.forcing(cfg.score_source, out)?;
    let sample = density_sample(&data.dataset.panels, &forcing);
    let profile = density_test(&sample, cfg.bin_width)?;
    out.csv("density.csv".into(), |w| profile.write_csv(w))?;
    let mut row = ResultRow::empty("density_jump", &format!("relative_score:{}", cfg.score_source.as_str()));
    row.bandwidth = Some(profile.bin_width);
    row.effect = Some(profile.jump);
    row.se = Some(profile.jump_se);
    row.n = Some(profile.n);
    if profile.significant() {
        row.warnings.push("density jump exceeds twice its standard error".into());
    }
    out.results.push(row);
    Ok(())
}

fn run_attrition(data: &mut Data, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let forcing = data.forcing(cfg.score_source, out)?;
    let fit = attrition_regression(&data.dataset.panels, &forcing, &cfg.controls, &cfg.fixed_effects, cfg.wave)?;
    out.csv("attrition.csv".into(), |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["term", "coef", "se"])?;
        for name in &fit.columns {
            let (c, s) = fit.coefficient(name).map_or((String::new(), String::new()), |e| (e.effect.to_string(), e.se.to_string()));
            w.write_record([name.clone(), c, s])?;
        }
        w.flush()
    })?;
    let e = fit.assignment_effect();
    let mut row = ResultRow::empty("attrition", &format!("attrited_w{}", if cfg.wave == quasird_core::dataset::Wave::FollowUp2 { 2 } else { 1 }));
    row.effect = Some(e.effect);
    row.se = Some(e.se);
    row.n = Some(fit.fit.n);
    out.results.push(row);
    Ok(())
}

fn run_cv(data: &mut Data, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let forcing = data.forcing(cfg.score_source, out)?;
    let grid = match &cfg.bandwidth {
        BandwidthPolicy::Cv(g) => g.clone(),
        BandwidthPolicy::Fixed(_) => None,
    };
    for o in data.outcomes(cfg) {
        let profile = cv_profile(data, &forcing, &o, grid.as_ref())?;
        let label = outcome_label(&o);
        out.csv(format!("cv_{}.csv", file_stem(&label)), |w| profile.write_csv(w))?;
        let mut row = ResultRow::empty("cv", &label);
        row.bandwidth = Some(profile.chosen);
        row.n = profile.candidates.iter().position(|&h| h == profile.chosen).map(|i| profile.n_used[i]);
        out.results.push(row);
    }
    Ok(())
}

fn run_sweep(data: &mut Data, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let forcing = data.forcing(cfg.score_source, out)?;
    let mut rows = Vec::new();
    for o in data.outcomes(cfg) {
        let label = outcome_label(&o);
        for &e in &cfg.estimators {
            let spec = rdd_spec(cfg, &o, cfg.sweep.first().copied().unwrap_or(1.0), e);
            for (h, res) in bandwidth_sweep(&data.dataset.panels, &forcing, &spec, &cfg.sweep)? {
                let row = match res {
                    Ok(r) => ResultRow::from_estimate(&r, &label),
                    Err(err) => {
                        let mut row = ResultRow::empty(e.as_str(), &label);
                        row.bandwidth = Some(h);
                        row.warnings.push(err.to_string());
                        row
                    }
                };
                rows.push(row);
            }
        }
    }
    out.csv("sweep.csv".into(), |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["outcome", "estimator", "bandwidth", "effect", "se", "f_stat", "n", "error"])?;
        for r in &rows {
            w.write_record([
                r.outcome.clone(),
                r.estimator.clone(),
                opt(r.bandwidth),
                opt(r.effect),
                opt(r.se),
                opt(r.f_stat),
                opt(r.n),
                if r.effect.is_none() { r.warnings.join("; ") } else { String::new() },
            ])?;
        }
        w.flush()
    })?;
    out.results.extend(rows);
    Ok(())
}

fn run_psm(data: &mut Data, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let forcing = match cfg.psm.treatment {
        TreatmentIndicator::Assigned => Some(data.forcing(cfg.score_source, out)?),
        TreatmentIndicator::Trained => None,
    };
    let spec = PropensitySpec {
        covariates: cfg.psm.covariates.clone(),
        fixed_effects: cfg.psm.fixed_effects.clone(),
        treatment: cfg.psm.treatment,
        trim: cfg.psm.trim,
    };
    let prop = fit_propensity(&data.dataset.panels, forcing.as_ref(), &spec)?;
    out.csv("propensity.csv".into(), |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["applicant_id", "pscore", "treated", "on_support"])?;
        for (id, p) in &prop.scores {
            w.write_record([
                id.to_string(),
                p.to_string(),
                (prop.treated[id] as u8).to_string(),
                (prop.support_mask[id] as u8).to_string(),
            ])?;
        }
        w.flush()
    })?;
    out.csv("propensity_model.csv".into(), |buf| {
        let mut w = csv_writer(buf);
        w.write_record(["term", "coef"])?;
        for name in &prop.columns {
            w.write_record([name.clone(), opt(prop.coefficient(name))])?;
        }
        w.flush()
    })?;
    for o in data.outcomes(cfg) {
        let label = outcome_label(&o);
        let naive = naive_did(&data.dataset.panels, &o, &prop)?;
        let ipsw = ipsw_did(&data.dataset.panels, &o, &prop)?;
        let (nn, matches) = nn_did(&data.dataset.panels, &o, &prop, cfg.psm.neighbours)?;
        out.csv(format!("matches_{}.csv", file_stem(&label)), |w| matches.write_csv(w))?;
        for r in [&naive, &ipsw, &nn] {
            out.results.push(ResultRow::from_estimate(r, &label));
        }
    }
    Ok(())
}

fn run_synth(data: &mut Data, cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let synth = cfg.synth.as_ref().ok_or_else(|| CliError::Config("synth needs a [synth] section with a seed".into()))?;
    let truth = data.truth.as_ref().expect("generated data carries its truth");
    let dataset = &data.dataset;
    out.csv("panel.csv".into(), |w| write_panel(dataset, w).map_err(|e| std::io::Error::other(e.to_string())))?;
    let scores = data.scores.as_ref().expect("generated data carries its scores");
    out.csv("scores.csv".into(), |w| scores.write_csv(w))?;
    out.csv("truth.csv".into(), |w| truth.write_records_csv(w))?;
    out.csv("truth_params.csv".into(), |w| truth.write_params_csv(synth, w))?;
    Ok(())
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<Outputs, CliError> {
    if command == Command::Synth && (cfg.synth.is_none() || cfg.panel.is_some()) {
        return Err(CliError::Config("synth takes a [synth] section and no input panel".into()));
    }
    let mut data = load(cfg)?;
    let mut out = Outputs::default();
    match command {
        Command::Validate => run_validate(&data, &mut out)?,
        Command::Score => run_score(&mut data, &mut out)?,
        Command::Thresholds => run_thresholds(&mut data, cfg, &mut out)?,
        Command::Estimate => run_estimate(&mut data, cfg, &mut out)?,
        Command::Balance => run_balance(&mut data, cfg, &mut out)?,
        Command::Density => run_density(&mut data, cfg, &mut out)?,
        Command::Attrition => run_attrition(&mut data, cfg, &mut out)?,
        Command::CvBandwidth => run_cv(&mut data, cfg, &mut out)?,
        Command::Sweep => run_sweep(&mut data, cfg, &mut out)?,
        Command::Psm => run_psm(&mut data, cfg, &mut out)?,
        Command::Synth => run_synth(&mut data, cfg, &mut out)?,
        Command::Report => {
            if cfg.score_source == ScoreSource::Reconstructed {
                run_thresholds(&mut data, cfg, &mut out)?;
            }
            run_estimate(&mut data, cfg, &mut out)?;
            run_balance(&mut data, cfg, &mut out)?;
            run_density(&mut data, cfg, &mut out)?;
            run_attrition(&mut data, cfg, &mut out)?;
            if cfg.psm_in_report {
                run_psm(&mut data, cfg, &mut out)?;
            }
        }
    }
    Ok(out)
}
