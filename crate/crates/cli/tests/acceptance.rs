//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when
//! any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use quasird_core::bandwidth::{cross_validate_points, cv_value};
use quasird_core::covariates::Covariate;
use quasird_core::dataset::{
    load_panel, ApplicantRecord, CoursePanel, OutcomeSpec, OutcomeValues, SpecialGroups, SubScores, Trade,
};
use quasird_core::diagnostics::{density_sample, density_test};
use quasird_core::psm::{fit_propensity, ipsw_did, naive_did, nn_did, PropensityFit, PropensitySpec};
use quasird_core::rdd::{estimate, Estimator, RddSpec};
use quasird_core::regression::{design, logit, ols, tsls};
use quasird_core::synth::{generate, generate_full, SynthConfig};
use quasird_core::threshold::{simulate_threshold, Forcing, ScoreSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

const SEEDS: u64 = 100;
const LATE_TRUE: f64 = 2.0;
const ORIGINAL_H: f64 = 20.0;
const RECONSTRUCTED_H: f64 = 3.0;

fn earnings() -> OutcomeSpec {
    OutcomeSpec::differenced("earnings")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn record(id: u64, course: i64, treated: bool, baseline: f64, followup: f64) -> ApplicantRecord {
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
        orig_subscores: SubScores([15, 10, 10, 5, 10]),
        treated,
        outcomes: BTreeMap::from([("y".to_string(), OutcomeValues { baseline, followup: Some(followup), followup2: None })]),
        attrited_w1: false,
        attrited_w2: false,
    }
}

// 1. Ranking form

const FORM: [([i32; 5], i32); 20] = [
    ([15, 20, 20, 10, 27], 92),
    ([15, 20, 20, 10, 25], 90),
    ([15, 20, 20, 10, 24], 89),
    ([15, 20, 20, 0, 30], 85),
    ([15, 20, 20, 5, 20], 80),
    ([15, 15, 20, 5, 25], 80),
    ([15, 20, 15, 0, 29], 79),
    ([15, 15, 25, 10, 13], 78),
    ([10, 15, 20, 5, 28], 78),
    ([15, 20, 15, 5, 22], 77),
    ([15, 15, 10, 10, 26], 76),
    ([15, 20, 10, 10, 20], 75),
    ([15, 15, 20, 0, 25], 75),
    ([15, 15, 20, 0, 23], 73),
    ([15, 15, 20, 5, 18], 73),
    ([15, 0, 20, 10, 27], 72),
    ([5, 20, 25, 0, 16], 66),
    ([15, 10, 20, 5, 15], 65),
    ([15, 15, 10, 5, 10], 55),
    ([15, 15, 10, 5, 6], 51),
];

fn ranking_form() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/ranking_form.csv");
    let file = std::fs::File::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let data = load_panel(file).map_err(|e| e.to_string())?;
    let panel = data.panels.first().ok_or("no course loaded")?;
    if data.panels.len() != 1 || panel.records.len() != 20 || panel.seats != 15 {
        return Err(format!("{} courses, {} records, {} seats", data.panels.len(), panel.records.len(), panel.seats));
    }
    for (i, (r, (subs, total))) in panel.records.iter().zip(FORM).enumerate() {
        if r.orig_subscores.0 != subs || r.orig_total() != total {
            return Err(format!("row {}: {:?} = {}, expected {:?} = {total}", i + 1, r.orig_subscores.0, r.orig_total(), subs));
        }
    }
    let admitted = panel.records.iter().filter(|r| r.orig_total() >= panel.orig_threshold).count();
    check(
        panel.orig_threshold == 73 && admitted == 15,
        format!("20 rows exact, threshold {} admits {admitted}", panel.orig_threshold),
    )
}

// 2. Sharp design

fn sharp_identity() -> Outcome {
    let cfg = SynthConfig { seed: 2024, p_take_assigned: 1.0, p_take_rejected: 0.0, ..SynthConfig::default() };
    let (data, _) = generate(&cfg).map_err(|e| e.to_string())?;
    let panels = &data.panels;
    let forcing = Forcing::original(panels);
    let outcomes = [
        OutcomeSpec::differenced("earnings"),
        OutcomeSpec::level("earnings"),
        OutcomeSpec::differenced("any_iga"),
        OutcomeSpec::level("any_iga"),
    ];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for o in &outcomes {
        for h in [2.0, 3.0, 5.0, 10.0, 20.0] {
            let spec = |e| RddSpec::new(o.clone(), h, ScoreSource::Original, e);
            let late = estimate(panels, &forcing, &spec(Estimator::Late)).map_err(|e| format!("{} h={h}: {e}", o.name))?;
            let itt = estimate(panels, &forcing, &spec(Estimator::Itt)).map_err(|e| format!("{} h={h}: {e}", o.name))?;
            for (a, b) in [(late.effect, itt.effect), (late.se, itt.se)] {
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
            }
            checked += 1;
        }
    }
    check(worst <= 1e-10, format!("{checked} outcome/bandwidth pairs, max gap {worst:.2e}"))
}

// 3. Fuzzy recovery

fn fuzzy_recovery() -> Outcome {
    let runs: Vec<Result<(f64, f64, f64), String>> = (1..=SEEDS)
        .into_par_iter()
        .map(|seed| {
            let (data, _) = generate(&SynthConfig { seed, ..SynthConfig::default() }).map_err(|e| e.to_string())?;
            let forcing = Forcing::original(&data.panels);
            let spec = |e| RddSpec::new(earnings(), ORIGINAL_H, ScoreSource::Original, e);
            let late = estimate(&data.panels, &forcing, &spec(Estimator::Late)).map_err(|e| e.to_string())?;
            let itt = estimate(&data.panels, &forcing, &spec(Estimator::Itt)).map_err(|e| e.to_string())?;
            Ok((late.effect, late.se, itt.effect))
        })
        .collect();
    let runs: Vec<(f64, f64, f64)> = runs.into_iter().collect::<Result<_, _>>()?;
    let cfg = SynthConfig::default();
    let itt_target = cfg.late_true * (cfg.p_take_assigned - cfg.p_take_rejected);
    let late_med = median(runs.iter().map(|r| r.0).collect());
    let itt_med = median(runs.iter().map(|r| r.2).collect());
    let covered = runs.iter().filter(|r| (r.0 - LATE_TRUE).abs() <= 1.96 * r.1).count();
    check(
        (late_med - LATE_TRUE).abs() <= 0.15 && covered >= 90 && (itt_med - itt_target).abs() <= 0.05,
        format!("median LATE {late_med:.3}, coverage {covered}/{SEEDS}, median ITT {itt_med:.3} (target {itt_target:.2})"),
    )
}

// 4. Manipulation contrast

fn manipulation_contrast() -> Outcome {
    let runs: Vec<Result<(f64, f64, f64), String>> = (1..=SEEDS)
        .into_par_iter()
        .map(|seed| {
            let out = generate_full(&SynthConfig { seed, ..SynthConfig::default() }.manipulated()).map_err(|e| e.to_string())?;
            let panels = &out.dataset.panels;
            let orig = Forcing::original(panels);
            let (recon, _) = Forcing::reconstructed(panels, &out.scores);
            let late = |f: &Forcing, h, s| estimate(panels, f, &RddSpec::new(earnings(), h, s, Estimator::Late)).map_err(|e| e.to_string());
            let o = late(&orig, ORIGINAL_H, ScoreSource::Original)?;
            let r = late(&recon, RECONSTRUCTED_H, ScoreSource::Reconstructed)?;
            Ok((o.effect, r.effect, r.se))
        })
        .collect();
    let runs: Vec<(f64, f64, f64)> = runs.into_iter().collect::<Result<_, _>>()?;
    let above = runs.iter().filter(|r| r.0 > r.1).count();
    let covered = runs.iter().filter(|r| (r.1 - LATE_TRUE).abs() <= 2.0 * r.2).count();
    check(
        above >= 90 && covered >= 90,
        format!(
            "original > reconstructed {above}/{SEEDS}, reconstructed within 2 SE {covered}/{SEEDS} (medians {:.3} vs {:.3})",
            median(runs.iter().map(|r| r.0).collect()),
            median(runs.iter().map(|r| r.1).collect())
        ),
    )
}

// 5. Threshold recovery

fn threshold_recovery() -> Outcome {
    let out = generate_full(&SynthConfig { seed: 5, n_courses: 1000, ..SynthConfig::default() }).map_err(|e| e.to_string())?;
    let mut panels = out.dataset.panels;
    let mut recovered = 0;
    let mut misses = Vec::new();
    for p in &mut panels {
        let mut totals: Vec<f64> = p.records.iter().map(|r| out.scores.recon_total(r.applicant_id).unwrap()).collect();
        totals.sort_by(|a, b| b.total_cmp(a));
        let tau = totals[(p.seats as usize).min(totals.len()) - 1];
        for r in &mut p.records {
            r.treated = out.scores.recon_total(r.applicant_id).unwrap() >= tau;
        }
        match simulate_threshold(p, &out.scores) {
            Ok(res) if res.sim_threshold == tau => recovered += 1,
            Ok(res) => misses.push(format!("course {}: {} vs {tau}", p.course_id, res.sim_threshold)),
            Err(e) => misses.push(format!("course {}: {e}", p.course_id)),
        }
    }
    check(
        recovered == panels.len() && panels.len() == 1000,
        format!("{recovered}/{} courses recovered{}", panels.len(), misses.first().map_or(String::new(), |m| format!("; first miss {m}"))),
    )
}

// 6. Density

fn density_flags(manipulated: bool) -> Result<usize, String> {
    let flags: Vec<Result<bool, String>> = (1..=SEEDS)
        .into_par_iter()
        .map(|seed| {
            let base = SynthConfig { seed, ..SynthConfig::default() };
            let cfg = if manipulated { base.manipulated() } else { base };
            let data = generate_full(&cfg).map_err(|e| e.to_string())?.dataset;
            let forcing = Forcing::original(&data.panels);
            let d = density_test(&density_sample(&data.panels, &forcing), 1.0).map_err(|e| e.to_string())?;
            Ok(d.jump > 2.0 * d.jump_se)
        })
        .collect();
    Ok(flags.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().filter(|&f| f).count())
}

fn density() -> Outcome {
    let clean = density_flags(false)?;
    let manipulated = density_flags(true)?;
    check(
        clean <= 10 && manipulated >= 90,
        format!("flagged: clean {clean}/{SEEDS}, manipulated {manipulated}/{SEEDS}"),
    )
}

// 7. Matching

fn constant_propensity() -> Result<String, String> {
    let (data, _) = generate(&SynthConfig { seed: 77, n_courses: 40, ..SynthConfig::default() }).map_err(|e| e.to_string())?;
    let records: Vec<&ApplicantRecord> = data.panels.iter().flat_map(|p| &p.records).collect();
    let prop = PropensityFit::from_scores(
        records.iter().map(|r| (r.applicant_id, 0.3)).collect(),
        records.iter().map(|r| (r.applicant_id, r.treated)).collect(),
        records.iter().map(|r| (r.applicant_id, r.course_id)).collect(),
        (0.0, 1.0),
    );
    let ipsw = ipsw_did(&data.panels, &earnings(), &prop).map_err(|e| e.to_string())?;
    let naive = naive_did(&data.panels, &earnings(), &prop).map_err(|e| e.to_string())?;
    let (mut s, mut n) = ([0.0; 2], [0.0; 2]);
    for r in &records {
        let o = &r.outcomes["earnings"];
        if let Some(f) = o.followup {
            s[r.treated as usize] += f - o.baseline;
            n[r.treated as usize] += 1.0;
        }
    }
    let did = s[1] / n[1] - s[0] / n[0];
    if !(close(ipsw.effect, naive.effect, 1e-10) && close(naive.effect, did, 1e-10) && close(ipsw.se, naive.se, 1e-10)) {
        return Err(format!("constant score: ipsw {} naive {} DID {did}", ipsw.effect, naive.effect));
    }
    Ok(format!("constant score DID {did:.4}"))
}

/// Treated records `(score, change)` matched to the `k` nearest controls and
/// every control tied with the k-th.
fn brute_force_nn(treated: &[(f64, f64)], controls: &[(f64, f64)], k: usize) -> f64 {
    let mut total = 0.0;
    for &(p, dy) in treated {
        let mut gaps: Vec<f64> = controls.iter().map(|c| (c.0 - p).abs()).collect();
        gaps.sort_by(f64::total_cmp);
        let kth = gaps[k - 1];
        let chosen: Vec<f64> = controls.iter().filter(|c| (c.0 - p).abs() <= kth).map(|c| c.1).collect();
        total += dy - chosen.iter().sum::<f64>() / chosen.len() as f64;
    }
    total / treated.len() as f64
}

fn dyadic_matching() -> Result<String, String> {
    let treated = [(0.25, 10.0), (0.375, 6.0), (0.625, 9.0), (0.875, 12.0)];
    let controls = [(0.125, 1.0), (0.25, 2.0), (0.5, 4.0), (0.75, 8.0)];
    let mut records = Vec::new();
    let mut scores = BTreeMap::new();
    for (i, (&(p, dy), t)) in treated.iter().map(|x| (x, true)).chain(controls.iter().map(|x| (x, false))).enumerate() {
        let id = i as u64 + 1;
        records.push(record(id, 1 + (i % 2) as i64, t, 3.0, 3.0 + dy));
        scores.insert(id, p);
    }
    let panels: Vec<CoursePanel> = [1, 2]
        .into_iter()
        .map(|c| CoursePanel::new(c, records.iter().filter(|r| r.course_id == c).cloned().collect(), 2, Trade::Farming))
        .collect();
    let prop = PropensityFit::from_scores(
        scores,
        records.iter().map(|r| (r.applicant_id, r.treated)).collect(),
        records.iter().map(|r| (r.applicant_id, r.course_id)).collect(),
        (0.0, 1.0),
    );
    let y = OutcomeSpec::differenced("y");
    // k = 1 by hand: 10-2, 6-(2+4)/2, 9-(4+8)/2, 12-8.
    let hand = (8.0 + 3.0 + 3.0 + 4.0) / 4.0;
    // Tie sets hold one, two or four controls, so these averages are exact.
    for k in [1, 2, 4] {
        let (res, _) = nn_did(&panels, &y, &prop, k).map_err(|e| e.to_string())?;
        let brute = brute_force_nn(&treated, &controls, k);
        if res.effect != brute || (k == 1 && res.effect != hand) {
            return Err(format!("k={k}: nn_did {} brute force {brute}", res.effect));
        }
    }
    Ok(format!("8-record matching exact for k=1,2,4 ({hand} at k=1)"))
}

fn selection_on_observables() -> Result<String, String> {
    let runs: Vec<Result<(bool, bool, bool), String>> = (1..=SEEDS)
        .into_par_iter()
        .map(|seed| {
            let cfg = SynthConfig { seed, late_true: 0.0, selection_strength: 1.0, selection_growth: 1.0, ..SynthConfig::default() };
            let (data, truth) = generate(&cfg).map_err(|e| e.to_string())?;
            let prop = fit_propensity(&data.panels, None, &PropensitySpec::new(vec![Covariate::Age, Covariate::Female]))
                .map_err(|e| e.to_string())?;
            let ipsw = ipsw_did(&data.panels, &earnings(), &prop).map_err(|e| e.to_string())?;
            let naive = naive_did(&data.panels, &earnings(), &prop).map_err(|e| e.to_string())?;
            let (mut s, mut n) = ([0.0; 2], [0.0; 2]);
            for r in data.panels.iter().flat_map(|p| &p.records) {
                if r.attrited_w1 || !prop.support_mask[&r.applicant_id] {
                    continue;
                }
                s[r.treated as usize] += truth.records[&r.applicant_id].selection_growth;
                n[r.treated as usize] += 1.0;
            }
            let planted = s[1] / n[1] - s[0] / n[0];
            Ok((
                ipsw.effect.abs() < 2.0 * ipsw.se,
                (naive.effect - planted).abs() < 2.0 * naive.se,
                naive.effect.abs() > 2.0 * naive.se,
            ))
        })
        .collect();
    let runs: Vec<(bool, bool, bool)> = runs.into_iter().collect::<Result<_, _>>()?;
    let count = |f: fn(&(bool, bool, bool)) -> bool| runs.iter().filter(|r| f(r)).count();
    let (ipsw_ok, naive_planted, naive_sig) = (count(|r| r.0), count(|r| r.1), count(|r| r.2));
    let detail = format!(
        "selection: IPSW within 2 SE of zero {ipsw_ok}/{SEEDS}, naive within 2 SE of planted bias {naive_planted}/{SEEDS}, naive significant {naive_sig}/{SEEDS}"
    );
    if ipsw_ok >= 90 && naive_planted >= 90 && naive_sig >= 90 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn matching() -> Outcome {
    let parts = [constant_propensity(), dyadic_matching(), selection_on_observables()];
    let failed = parts.iter().any(|p| p.is_err());
    let detail = parts.iter().map(|p| p.as_ref().unwrap_or_else(|e| e).clone()).collect::<Vec<_>>().join("; ");
    check(!failed, detail)
}

// 8. Regression micro-oracles

fn two_cluster_sandwich() -> Result<String, String> {
    let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [1.0, 3.0, 2.0, 6.0, 4.0, 5.0];
    let g = [1i64, 1, 1, 2, 2, 2];
    let fit = ols(&design(&[vec![1.0; 6], x.to_vec()]), &y, None, &g).map_err(|e| e.to_string())?;

    let n = 6.0;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    let b = (n * sxy - sx * sy) / det;
    let a = (sy - b * sx) / n;
    let inv = [[sxx / det, -sx / det], [-sx / det, n / det]];
    let mut meat = [[0.0; 2]; 2];
    for c in [1, 2] {
        let (mut u0, mut u1) = (0.0, 0.0);
        for i in 0..6 {
            if g[i] == c {
                let e = y[i] - a - b * x[i];
                u0 += e;
                u1 += e * x[i];
            }
        }
        let u = [u0, u1];
        for r in 0..2 {
            for s in 0..2 {
                meat[r][s] += u[r] * u[s];
            }
        }
    }
    let factor = 2.0 / 1.0 * (5.0 / 4.0);
    let mut v = [[0.0; 2]; 2];
    for r in 0..2 {
        for s in 0..2 {
            for p in 0..2 {
                for q in 0..2 {
                    v[r][s] += inv[r][p] * meat[p][q] * inv[q][s];
                }
            }
            v[r][s] *= factor;
        }
    }
    let ok = close(fit.coef(0).unwrap(), a, 1e-12)
        && close(fit.coef(1).unwrap(), b, 1e-12)
        && close(fit.se(0).unwrap(), v[0][0].sqrt(), 1e-10)
        && close(fit.se(1).unwrap(), v[1][1].sqrt(), 1e-10)
        && close(fit.cov(0, 1).unwrap(), v[0][1], 1e-10);
    if ok {
        Ok(format!("2-cluster sandwich se(slope) {:.6}", v[1][1].sqrt()))
    } else {
        Err(format!("sandwich: se {:?} vs {:?}", (fit.se(0), fit.se(1)), (v[0][0].sqrt(), v[1][1].sqrt())))
    }
}

fn wald_ratio() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 400;
    let z: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let d: Vec<f64> = z.iter().map(|&zi| if rng.random::<f64>() < 0.2 + 0.5 * zi { 1.0 } else { 0.0 }).collect();
    let y: Vec<f64> = d.iter().map(|&di| 1.0 + 1.5 * di + rng.random::<f64>()).collect();
    let clusters: Vec<i64> = (0..n as i64).map(|i| i / 20).collect();
    let fit = tsls(&y, &design(std::slice::from_ref(&d)), &design(std::slice::from_ref(&z)), &design(&[vec![1.0; n]]), &clusters)
        .map_err(|e| e.to_string())?;
    let mean = |v: &[f64], g: f64| {
        let sel: Vec<f64> = v.iter().zip(&z).filter(|(_, &zi)| zi == g).map(|(a, _)| *a).collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    let ratio = (mean(&y, 1.0) - mean(&y, 0.0)) / (mean(&d, 1.0) - mean(&d, 0.0));
    let got = fit.second_stage.coef(0).unwrap();
    if close(got, ratio, 1e-10) {
        Ok(format!("Wald ratio {ratio:.6}"))
    } else {
        Err(format!("Wald ratio {ratio} vs 2SLS {got}"))
    }
}

fn log_likelihood(x: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    x.iter().zip(y).map(|(&xi, &yi)| {
        let eta = a + b * xi;
        let p = 1.0 / (1.0 + (-eta).exp());
        if yi == 1.0 { p.ln() } else { (1.0 - p).ln() }
    }).sum()
}

fn logit_grid() -> Result<String, String> {
    let x = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
    let y = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
    let clusters: Vec<i64> = (0..12).map(|i| i / 3).collect();
    let fit = logit(&design(&[vec![1.0; 12], x.to_vec()]), &y, &clusters).map_err(|e| e.to_string())?;
    let (mut ca, mut cb, mut step) = (0.0, 0.0, 0.5);
    for _ in 0..40 {
        let mut best = (f64::NEG_INFINITY, ca, cb);
        for i in -10..=10 {
            for j in -10..=10 {
                let (a, b) = (ca + i as f64 * step, cb + j as f64 * step);
                let ll = log_likelihood(&x, &y, a, b);
                if ll > best.0 {
                    best = (ll, a, b);
                }
            }
        }
        (ca, cb) = (best.1, best.2);
        step *= 0.3;
    }
    let (ga, gb) = (fit.fit.coef(0).unwrap(), fit.fit.coef(1).unwrap());
    if (ga - ca).abs() < 1e-6 && (gb - cb).abs() < 1e-6 {
        Ok(format!("logit grid optimum ({ca:.6}, {cb:.6})"))
    } else {
        Err(format!("logit ({ga}, {gb}) vs grid ({ca}, {cb})"))
    }
}

fn orthogonality() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let n = 300;
    let cols: Vec<Vec<f64>> = (0..6)
        .map(|j| (0..n).map(|_| if j == 0 { 1.0 } else { rng.random::<f64>() * 10.0 * j as f64 }).collect())
        .collect();
    let y: Vec<f64> = (0..n).map(|i| cols.iter().map(|c| c[i]).sum::<f64>() + rng.random::<f64>() * 5.0).collect();
    let weights: Vec<f64> = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
    let clusters: Vec<i64> = (0..n as i64).map(|i| i % 15).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    for w in [None, Some(weights.as_slice())] {
        let fit = ols(&design(&cols), &y, w, &clusters).map_err(|e| e.to_string())?;
        let we: Vec<f64> = fit.residuals.iter().enumerate().map(|(i, e)| e * w.map_or(1.0, |w| w[i])).collect();
        for c in &cols {
            let dot: f64 = c.iter().zip(&we).map(|(a, b)| a * b).sum();
            worst = worst.max(dot.abs() / (norm(c) * norm(&we)));
        }
    }
    if worst < 1e-8 {
        Ok(format!("max relative X'We {worst:.1e}"))
    } else {
        Err(format!("residual orthogonality {worst:.1e}"))
    }
}

fn regression_oracles() -> Outcome {
    let parts = [two_cluster_sandwich(), wald_ratio(), logit_grid(), orthogonality()];
    let failed = parts.iter().any(|p| p.is_err());
    check(!failed, parts.iter().map(|p| p.as_ref().unwrap_or_else(|e| e).clone()).collect::<Vec<_>>().join("; "))
}

// 9. Bandwidth cross-validation

/// One-sided CV by enumeration: each point is predicted from the points
/// strictly beyond it on its own side within `h`, by a normal-equation line.
fn brute_force_cv(pts: &[(f64, f64)], h: f64) -> Option<f64> {
    let mut errs = Vec::new();
    for &(x, y) in pts {
        let window: Vec<(f64, f64)> = pts
            .iter()
            .copied()
            .filter(|&(xj, _)| if x < 0.0 { xj < x && xj >= x - h } else { xj > x && xj <= x + h })
            .collect();
        if window.len() < 3 {
            continue;
        }
        let n = window.len() as f64;
        let (sx, sy) = window.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let sxx: f64 = window.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = window.iter().map(|p| p.0 * p.1).sum();
        let det = n * sxx - sx * sx;
        if det.abs() < 1e-12 {
            continue;
        }
        let slope = (n * sxy - sx * sy) / det;
        let intercept = (sy - slope * sx) / n;
        errs.push((y - intercept - slope * x).powi(2));
    }
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

fn bandwidth_cv() -> Outcome {
    let line: Vec<(f64, f64)> = (-40..=40)
        .map(|i| i as f64 * 0.25)
        .map(|x| (x, if x < 0.0 { 3.0 + 0.7 * x } else { 6.0 - 1.2 * x }))
        .collect();
    let grid: Vec<f64> = (1..=12).map(|i| i as f64 * 0.5).collect();
    let profile = cross_validate_points("line", &line, &grid).map_err(|e| e.to_string())?;
    let max_err = profile.cv_values.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    if max_err > 1e-20 {
        return Err(format!("piecewise-linear CV error {max_err:.2e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pts: Vec<(f64, f64)> = (0..20)
        .map(|_| {
            let x = (rng.random::<f64>() * 12.0 - 6.0).round() / 2.0;
            (x, 1.0 + 0.3 * x + rng.random::<f64>())
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let grid = [1.0, 1.5, 2.0, 2.5, 3.0, 4.0];
    let profile = cross_validate_points("random", &pts, &grid).map_err(|e| e.to_string())?;
    let mut best: Option<(f64, f64)> = None;
    for (i, &h) in grid.iter().enumerate() {
        let brute = brute_force_cv(&pts, h);
        let got = profile.cv_values[i];
        let same = match (got, brute) {
            (Some(a), Some(b)) => close(a, b, 1e-12),
            (None, None) => true,
            _ => false,
        };
        if !same || got != cv_value(&pts, h).0 {
            return Err(format!("h={h}: {got:?} vs brute force {brute:?}"));
        }
        if let Some(b) = brute {
            if best.is_none_or(|(_, v)| b < v) {
                best = Some((h, b));
            }
        }
    }
    let chosen = best.map(|b| b.0);
    check(
        chosen == Some(profile.chosen),
        format!("piecewise-linear max error {max_err:.1e}; 20-record enumeration matches, chosen h {}", profile.chosen),
    )
}

// 10. Determinism

fn run_cli(args: &[&str], threads: usize) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_quasird"))
        .args(args)
        .env("QUASIRD_THREADS", threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn dir_contents(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}

fn in_process(threads: usize) -> Result<(Vec<u8>, f64, f64), String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let out = generate_full(&SynthConfig { seed: 31, ..SynthConfig::default() }.manipulated()).map_err(|e| e.to_string())?;
        let mut panel = Vec::new();
        quasird_core::dataset::write_panel(&out.dataset, &mut panel).map_err(|e| e.to_string())?;
        let (forcing, _) = Forcing::reconstructed(&out.dataset.panels, &out.scores);
        let r = estimate(&out.dataset.panels, &forcing, &RddSpec::new(earnings(), 4.0, ScoreSource::Reconstructed, Estimator::Late))
            .map_err(|e| e.to_string())?;
        Ok((panel, r.effect, r.se))
    })
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth_ini = tmp.path().join("synth.ini");
    let report_ini = tmp.path().join("report.ini");
    let write = |p: &Path, text: &str| std::fs::write(p, text).map_err(|e| e.to_string());
    write(&synth_ini, "[synth]\nseed = 99\n")?;
    write(&report_ini, "[estimate]\nestimators = late, itt\n\n[psm]\ncovariates = age, female\n")?;
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let mut outputs = Vec::new();
    for threads in [1, 4] {
        let synth = tmp.path().join(format!("synth{threads}"));
        let report = tmp.path().join(format!("report{threads}"));
        run_cli(&["synth", "--config", &s(&synth_ini), "--out", &s(&synth)], threads)?;
        let (panel, scores) = (synth.join("panel.csv"), synth.join("scores.csv"));
        run_cli(
            &["report", "--config", &s(&report_ini), "--seed", "99", "--in", &s(&panel), "--scores", &s(&scores), "--out", &s(&report)],
            threads,
        )?;
        outputs.push((dir_contents(&synth)?, dir_contents(&report)?));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    if a != b {
        let differing: Vec<&String> = a.0.keys().chain(a.1.keys()).filter(|k| a.0.get(*k) != b.0.get(*k) || a.1.get(*k) != b.1.get(*k)).collect();
        return Err(format!("artifacts differ across thread counts: {differing:?}"));
    }
    let one = in_process(1)?;
    let four = in_process(4)?;
    check(
        one == four,
        format!("{} CLI artifacts byte-identical with 1 and 4 threads; in-process pools agree", a.0.len() + a.1.len()),
    )
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "ranking form golden", budget: Duration::from_secs(1), run: ranking_form },
        Criterion { name: "sharp design identity", budget: Duration::from_secs(5), run: sharp_identity },
        Criterion { name: "fuzzy oracle recovery", budget: Duration::from_secs(120), run: fuzzy_recovery },
        Criterion { name: "manipulation contrast", budget: Duration::from_secs(180), run: manipulation_contrast },
        Criterion { name: "threshold recovery", budget: Duration::from_secs(10), run: threshold_recovery },
        Criterion { name: "density diagnostic", budget: Duration::from_secs(60), run: density },
        Criterion { name: "matching equivalences", budget: Duration::from_secs(60), run: matching },
        Criterion { name: "regression micro-oracles", budget: Duration::from_secs(5), run: regression_oracles },
        Criterion { name: "bandwidth cross-validation", budget: Duration::from_secs(5), run: bandwidth_cv },
        Criterion { name: "determinism", budget: Duration::from_secs(120), run: determinism },
    ];
    let mut failures = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over time budget")),
            Err(d) => (false, d),
        };
        failures += usize::from(!pass);
        println!(
            "{} {:>2} {:<28} {:>7.2}s / {:>3}s  {detail}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
