mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use quasird_core::covariates::Covariate;
use quasird_core::dataset::{CoursePanel, OutcomeSpec};
use quasird_core::psm::{fit_propensity, ipsw_did, naive_did, nn_did, PropensityFit, PropensitySpec, PsmError, DEFAULT_TRIM};
use quasird_core::synth::{generate, SynthConfig};

use common::{panels_from, record, small, with_outcome};

/// `(propensity, treated, outcome change)` per record.
type Unit = (f64, bool, f64);

fn build(units: &[Unit], id_of: impl Fn(u64) -> u64) -> (Vec<CoursePanel>, PropensityFit) {
    let mut scores = BTreeMap::new();
    let mut treated = BTreeMap::new();
    let mut clusters = BTreeMap::new();
    let mut records = Vec::new();
    for (i, &(p, t, dy)) in units.iter().enumerate() {
        let id = id_of(i as u64 + 1);
        let course = 1 + (i % 3) as i64;
        records.push(with_outcome(record(id, course, [15, 5, 5, 5, 5], t), "earnings", 10.0, Some(10.0 + dy)));
        scores.insert(id, p);
        treated.insert(id, t);
        clusters.insert(id, course);
    }
    (panels_from(records, 1), PropensityFit::from_scores(scores, treated, clusters, DEFAULT_TRIM))
}

fn units() -> impl Strategy<Value = Vec<Unit>> {
    prop::collection::vec(((1i32..64).prop_map(|v| v as f64 / 64.0), any::<bool>(), (-200i32..200).prop_map(f64::from)), 6..60)
        .prop_filter("both groups", |u| u.iter().filter(|x| x.1).count() >= 1 && u.iter().filter(|x| !x.1).count() >= 4)
}

fn outcome() -> OutcomeSpec {
    OutcomeSpec::differenced("earnings")
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn perfect_matches_give_zero() {
    let u = [(0.25, true, 3.0), (0.25, false, 3.0), (0.5, true, -7.0), (0.5, false, -7.0), (0.75, true, 11.0), (0.75, false, 11.0)];
    let (p, prop) = build(&u, |i| i);
    let (res, m) = nn_did(&p, &outcome(), &prop, 1).unwrap();
    assert_eq!(res.effect, 0.0);
    assert!(m.matches.values().all(|l| l.len() == 1 && l[0].2 == 0.0));
}

#[test]
fn dyadic_all_controls_is_exact_difference_in_means() {
    let u = [(0.2, true, 5.0), (0.4, true, 9.0), (0.6, true, 2.0), (0.8, true, 8.0), (0.1, false, 1.0), (0.3, false, 4.0), (0.5, false, 6.0), (0.9, false, 3.0)];
    let (p, prop) = build(&u, |i| i);
    let (res, _) = nn_did(&p, &outcome(), &prop, 4).unwrap();
    assert_eq!(res.effect, 6.0 - 3.5);
}

#[test]
fn trimming_and_settings_errors() {
    let u = [(0.005, true, 1.0), (0.995, false, 2.0), (0.5, false, 3.0)];
    let (p, prop) = build(&u, |i| i);
    assert_eq!(prop.support_mask.values().copied().collect::<Vec<_>>(), [false, false, true]);
    assert_eq!(nn_did(&p, &outcome(), &prop, 1).unwrap_err(), PsmError::EmptySupport);
    assert_eq!(naive_did(&p, &outcome(), &prop).unwrap_err(), PsmError::EmptySupport);

    let u = [(0.3, true, 1.0), (0.4, false, 2.0), (0.5, false, 3.0)];
    let (p, prop) = build(&u, |i| i);
    assert_eq!(nn_did(&p, &outcome(), &prop, 3).unwrap_err(), PsmError::InsufficientControls { needed: 3, found: 2 });
    assert!(matches!(nn_did(&p, &outcome(), &prop, 0), Err(PsmError::InvalidSettings(_))));

    let (data, _) = generate(&small(1, 10)).unwrap();
    let bad = PropensitySpec { trim: (0.6, 0.9), ..PropensitySpec::new(vec![Covariate::Age]) };
    assert!(matches!(fit_propensity(&data.panels, None, &bad), Err(PsmError::InvalidSettings(_))));
}

#[test]
fn fitted_scores_are_interior_and_mask_follows_trim() {
    let config = SynthConfig { selection_strength: 1.0, ..small(3, 40) };
    let (data, _) = generate(&config).unwrap();
    let spec = PropensitySpec { trim: (0.2, 0.8), ..PropensitySpec::new(vec![Covariate::Age, Covariate::Female]) };
    let fit = fit_propensity(&data.panels, None, &spec).unwrap();
    for (id, &p) in &fit.scores {
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(fit.support_mask[id], (0.2..=0.8).contains(&p));
    }
    assert!(fit.coefficient("age").is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_sum_to_one(u in units(), k in 1usize..5) {
        let (p, prop) = build(&u, |i| i);
        let (_, m) = nn_did(&p, &outcome(), &prop, k).unwrap();
        for list in m.matches.values() {
            prop_assert!(list.len() >= k);
            // each weight is exactly 1/|list|; the float sum is 1 up to rounding
            prop_assert!(list.iter().all(|x| x.1 == 1.0 / list.len() as f64));
            prop_assert!((list.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() <= list.len() as f64 * f64::EPSILON);
            // growing past k only for ties with the k-th distance
            let mut gaps: Vec<f64> = list.iter().map(|x| x.2).collect();
            gaps.sort_by(f64::total_cmp);
            prop_assert!(gaps[k - 1..].iter().all(|&g| g == gaps[k - 1]));
        }
    }

    #[test]
    fn all_controls_is_difference_in_means(u in units()) {
        let (p, prop) = build(&u, |i| i);
        let nc = u.iter().filter(|x| !x.1).count();
        let (res, _) = nn_did(&p, &outcome(), &prop, nc).unwrap();
        let want = mean(u.iter().filter(|x| x.1).map(|x| x.2)) - mean(u.iter().filter(|x| !x.1).map(|x| x.2));
        prop_assert!((res.effect - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn constant_propensity_ipsw_is_naive(u in units(), c in 1i32..64) {
        let c = c as f64 / 64.0;
        let flat: Vec<Unit> = u.iter().map(|&(_, t, dy)| (c, t, dy)).collect();
        let (p, prop) = build(&flat, |i| i);
        let a = ipsw_did(&p, &outcome(), &prop).unwrap();
        let b = naive_did(&p, &outcome(), &prop).unwrap();
        let want = mean(u.iter().filter(|x| x.1).map(|x| x.2)) - mean(u.iter().filter(|x| !x.1).map(|x| x.2));
        prop_assert!((a.effect - b.effect).abs() < 1e-10 * want.abs().max(1.0));
        prop_assert!((b.effect - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn monotone_id_relabel_leaves_matching(u in units(), k in 1usize..4, a in 2u64..50, b in 0u64..1000) {
        let (p1, prop1) = build(&u, |i| i);
        let (p2, prop2) = build(&u, |i| a * i + b);
        let (r1, m1) = nn_did(&p1, &outcome(), &prop1, k).unwrap();
        let (r2, m2) = nn_did(&p2, &outcome(), &prop2, k).unwrap();
        prop_assert_eq!(r1.effect, r2.effect);
        prop_assert_eq!(r1.se, r2.se);
        let relabelled: BTreeMap<u64, Vec<(u64, f64, f64)>> = m1
            .matches
            .iter()
            .map(|(&t, l)| (a * t + b, l.iter().map(|&(c, w, g)| (a * c + b, w, g)).collect()))
            .collect();
        prop_assert_eq!(relabelled, m2.matches);
    }
}
