use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sleepcbm_core::concepts::compute_concepts;
use sleepcbm_core::eval::{
    agreement_report, bland_altman, classification_report, confusion_matrix, icc, mae, r2, rmse, spearman,
    weighted_scores,
};
use sleepcbm_core::experiments::split_cohort;
use sleepcbm_core::preprocess::{pad_or_truncate, preprocess_pipeline, savgol_smooth, standardize, PreprocessConfig};
use sleepcbm_core::regressor::Standardizer;
use sleepcbm_core::signal::{EventKind, OximetrySignal, RespiratoryEvent, SeverityClass};

fn clean(v: Vec<f64>) -> OximetrySignal {
    OximetrySignal::from_clean(v).unwrap()
}

fn kind() -> impl Strategy<Value = EventKind> {
    prop_oneof![
        Just(EventKind::ObstructiveApnea),
        Just(EventKind::CentralApnea),
        Just(EventKind::Hypopnea),
        Just(EventKind::Desaturation),
        Just(EventKind::Artifact),
    ]
}

fn event() -> impl Strategy<Value = RespiratoryEvent> {
    (kind(), 0.0f64..100.0, prop_oneof![0.0f64..12.0, Just(2.0), Just(3.0), Just(4.0)], any::<bool>(), prop_oneof![Just(30.0), 0.0f64..100.0])
        .prop_map(|(kind, start, desat, arousal, flow)| RespiratoryEvent {
            kind,
            start_s: start,
            duration_s: 10.0,
            flow_reduction_pct: flow,
            desat_pct: desat,
            arousal,
        })
}

/// Which of the eight rate concepts an event counts toward, written as an
/// explicit table over event kinds rather than boolean combinations.
fn predicate_row(e: &RespiratoryEvent) -> [bool; 8] {
    let d = e.desat_pct;
    match e.kind {
        EventKind::ObstructiveApnea => [true, true, false, false, true, d >= 2.0, d >= 3.0, d >= 4.0],
        EventKind::CentralApnea => [true, true, true, true, true, d >= 2.0, d >= 3.0, d >= 4.0],
        EventKind::Hypopnea if e.flow_reduction_pct > 30.0 => [
            d >= 4.0,
            d >= 4.0 || e.arousal,
            d >= 3.0,
            d >= 4.0 || e.arousal,
            true,
            d >= 2.0,
            d >= 3.0,
            d >= 4.0,
        ],
        _ => [false; 8],
    }
}

const RATE_SLOTS: [usize; 8] = [0, 1, 2, 3, 6, 7, 8, 9];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn savgol_reproduces_polynomials(
        coeffs in prop::collection::vec(-1.0f64..1.0, 4),
        half in 2usize..9,
        order in 0usize..4,
        n in 40usize..120,
    ) {
        let window = 2 * half + 1;
        prop_assume!(order < window);
        let poly = |t: f64| {
            let x = t / n as f64;
            (0..=order).map(|k| coeffs[k] * x.powi(k as i32)).sum::<f64>() * 10.0 + 95.0
        };
        let v: Vec<f64> = (0..n).map(|t| poly(t as f64)).collect();
        let y = savgol_smooth(&clean(v.clone()), window, order).unwrap();
        for (a, b) in y.samples().iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn savgol_is_linear(
        x in prop::collection::vec(-5.0f64..5.0, 30..80),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (i as f64 * 0.37).cos() * v).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let sm = savgol_smooth(&clean(mix), 15, 2).unwrap();
        let sx = savgol_smooth(&clean(x.clone()), 15, 2).unwrap();
        let sy = savgol_smooth(&clean(y), 15, 2).unwrap();
        for ((m, p), q) in sm.samples().iter().zip(sx.samples()).zip(sy.samples()) {
            prop_assert!((m - (a * p + b * q)).abs() < 1e-9);
        }
    }

    #[test]
    fn pad_or_truncate_is_idempotent(v in prop::collection::vec(50.0f64..100.0, 1..200), n in 1usize..250) {
        let once = pad_or_truncate(&clean(v), n);
        prop_assert_eq!(once.len(), n);
        prop_assert_eq!(pad_or_truncate(&once, n), once);
    }

    #[test]
    fn standardize_statistics(v in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        let z = standardize(&v);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if z.iter().all(|&x| x == 0.0) {
            let m = v.iter().sum::<f64>() / n;
            prop_assert!(v.iter().all(|x| (x - m).abs() < 1e-6));
        } else {
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_matches_predicate_table(events in prop::collection::vec(event(), 0..40), tst in 0.5f64..9.0) {
        let sig = clean(vec![95.0; 3600]);
        let c = compute_concepts(&events, &sig, tst).unwrap().to_array();
        let mut counts = [0u32; 8];
        for e in &events {
            for (k, hit) in predicate_row(e).iter().enumerate() {
                counts[k] += u32::from(*hit);
            }
        }
        for (k, &slot) in RATE_SLOTS.iter().enumerate() {
            prop_assert_eq!(c[slot], counts[k] as f64 / tst);
        }
        prop_assert!(c[6] >= c[7] && c[7] >= c[8] && c[8] >= c[9]);
        prop_assert!(c[1] >= c[0]);
    }

    #[test]
    fn oracle_additivity_and_scale(
        a in prop::collection::vec(event(), 0..20),
        b in prop::collection::vec(event(), 0..20),
        tst in 0.5f64..9.0,
    ) {
        let sig = clean(vec![95.0; 3600]);
        let ca = compute_concepts(&a, &sig, tst).unwrap().to_array();
        let cb = compute_concepts(&b, &sig, tst).unwrap().to_array();
        let both: Vec<RespiratoryEvent> = a.iter().chain(&b).cloned().collect();
        let cab = compute_concepts(&both, &sig, tst).unwrap().to_array();
        let double = compute_concepts(&both, &sig, 2.0 * tst).unwrap().to_array();
        for &j in &RATE_SLOTS {
            prop_assert!((cab[j] * tst - (ca[j] * tst + cb[j] * tst)).abs() < 1e-9);
            prop_assert_eq!(double[j], cab[j] / 2.0);
        }
    }

    #[test]
    fn metric_invariants(
        pairs in prop::collection::vec((0.0f64..60.0, 0.0f64..60.0), 10..60),
        perm_seed in any::<u64>(),
    ) {
        let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let yh: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let a = agreement_report(&y, &yh).unwrap();
        prop_assert!(a.r2 <= 1.0);
        prop_assert!((-1.0..=1.0).contains(&a.icc));
        prop_assert!(a.rmse >= a.mae - 1e-12 && a.mae >= 0.0);
        let ba = bland_altman(&y, &yh).unwrap();
        let n = y.len() as f64;
        prop_assert!((ba.bias - (yh.iter().sum::<f64>() / n - y.iter().sum::<f64>() / n)).abs() < 1e-12);
        prop_assert!(ba.loa_low <= ba.bias && ba.bias <= ba.loa_high);

        // Simultaneous permutation leaves every metric unchanged.
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let py: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        let pyh: Vec<f64> = order.iter().map(|&i| yh[i]).collect();
        prop_assert!((r2(&py, &pyh).unwrap() - a.r2).abs() < 1e-9);
        prop_assert!((icc(&py, &pyh).unwrap() - a.icc).abs() < 1e-9);
        prop_assert!((mae(&py, &pyh).unwrap() - a.mae).abs() < 1e-9);
        prop_assert!((rmse(&py, &pyh).unwrap() - a.rmse).abs() < 1e-9);
        prop_assert!((spearman(&py, &pyh).unwrap() - spearman(&y, &yh).unwrap()).abs() < 1e-9);

        let rs: Vec<SeverityClass> = y.iter().map(|&v| SeverityClass::from_ahi(v).unwrap()).collect();
        let ps: Vec<SeverityClass> = yh.iter().map(|&v| SeverityClass::from_ahi(v).unwrap()).collect();
        let rep = classification_report(&rs, &ps, 50, perm_seed).unwrap();
        prop_assert_eq!(rep.confusion.iter().flatten().sum::<u64>() as usize, y.len());
        for i in [rep.f1, rep.precision, rep.sensitivity, rep.specificity] {
            prop_assert!(i.lower <= i.point && i.point <= i.upper);
            prop_assert!((0.0..=1.0).contains(&i.point));
        }
        let accuracy = rs.iter().zip(&ps).filter(|(a, b)| a == b).count() as f64 / n;
        prop_assert!((weighted_scores(&confusion_matrix(&rs, &ps)).sensitivity - accuracy).abs() < 1e-12);
        let prs: Vec<SeverityClass> = order.iter().map(|&i| rs[i]).collect();
        let pps: Vec<SeverityClass> = order.iter().map(|&i| ps[i]).collect();
        prop_assert_eq!(confusion_matrix(&prs, &pps), rep.confusion);
    }

    #[test]
    fn severity_is_monotone(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(SeverityClass::from_ahi(lo).unwrap() <= SeverityClass::from_ahi(hi).unwrap());
    }

    #[test]
    fn standardizer_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 2..30)) {
        let s = Standardizer::fit(&rows).unwrap();
        for r in &rows {
            for (a, b) in s.invert(&s.apply(r)).iter().zip(r) {
                prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0) * 1e3);
            }
        }
    }

    #[test]
    fn split_is_a_partition(n in 10usize..200, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (a, b, c) = split_cohort(&items, [0.65, 0.25, 0.10], seed).unwrap();
        let mut all = [a, b, c].concat();
        all.sort_unstable();
        prop_assert_eq!(all, items);
    }
}

#[test]
fn pipeline_is_deterministic() {
    let v: Vec<f64> = (0..3000).map(|i| 95.0 + (i as f64 * 0.05).sin() * 2.0).collect();
    let mut readings = v.clone();
    readings[500..520].fill(f64::NAN);
    let s = OximetrySignal::from_readings(&readings);
    let cfg = PreprocessConfig { target_len: 3600, ..Default::default() };
    let a = preprocess_pipeline(&s, &cfg).unwrap();
    let b = preprocess_pipeline(&s, &cfg).unwrap();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}
