use fastweight_motifs::synthetic::{calibrate_channel, labelled_cohort, true_source, SyntheticSpec};
use fastweight_motifs::tau::{calibrate_tau, inner_summary, stability_test, TauConfig, INNER_FOLDS};
use fastweight_motifs::{Motif, MotifError};

// (cohort, tau_bar, SE, published |t|, published p)
const TABLE: [(&str, f64, f64, f64, f64); 5] = [
    ("Lung", 0.483, 0.018, 1.63, 0.12),
    ("THCA", 0.477, 0.021, 1.89, 0.10),
    ("GBM", 0.492, 0.016, 0.87, 0.48),
    ("ESCA", 0.501, 0.019, 0.09, 0.93),
    ("PACA", 0.488, 0.020, 1.04, 0.38),
];

#[test]
fn published_t_column_within_rounding() {
    for (name, tau, se, t_pub, _) in TABLE {
        let s = stability_test(tau, se, 0.5, INNER_FOLDS).unwrap();
        let t = s.t.unwrap();
        let oracle = (tau - 0.5) / (se / 3f64.sqrt());
        assert!((t - oracle).abs() < 1e-12);
        assert!((t.abs() - t_pub).abs() <= 0.01, "{name}: {t}");
    }
}

#[test]
fn two_sided_df2_pvalues_and_published_column() {
    let mut one_sided_like = Vec::new();
    for (name, tau, se, _, p_pub) in TABLE {
        let s = stability_test(tau, se, 0.5, INNER_FOLDS).unwrap();
        let t = s.t.unwrap().abs();
        let closed = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((s.p_two_sided.unwrap() - closed).abs() < 1e-9);
        assert!((s.p_one_sided.unwrap() - closed / 2.0).abs() < 1e-9);
        assert!(s.p_two_sided.unwrap() >= 0.05, "{name} passes the two-sided rule");
        if (s.p_one_sided.unwrap() - p_pub).abs() < 0.01 {
            one_sided_like.push(name);
        }
    }
    assert_eq!(one_sided_like, vec!["Lung", "THCA"]);
}

#[test]
fn identical_inner_optima_pass_with_flag() {
    let (mean, se) = inner_summary(&[0.7, 0.7, 0.7]).unwrap();
    let s = stability_test(mean, se, 0.5, INNER_FOLDS).unwrap();
    assert!(s.zero_variance);
    assert_eq!((s.t, s.p_two_sided), (None, None));
    assert!(inner_summary(&[0.5]).is_err());
}

#[test]
fn se_uses_n_times_n_minus_one() {
    let (mean, se) = inner_summary(&[0.4, 0.5, 0.6]).unwrap();
    assert!((mean - 0.5).abs() < 1e-15);
    assert!((se - (0.02f64 / 6.0).sqrt()).abs() < 1e-15);
}

#[test]
fn planted_cohort_calibrates() {
    let spec = SyntheticSpec::default();
    let source = true_source(&spec, 42).unwrap();
    let motif = Motif::new(vec![1, 4, 6]);
    let (reps, labels) = labelled_cohort(&spec, &source, &motif, 0.8, 150, 150, 42);
    let cfg = TauConfig { seed: 42, ..TauConfig::default() };
    let cal = calibrate_channel("planted", &motif, &reps, &labels, &cfg).unwrap();
    assert!(cal.pass);
    assert_eq!(cal.df, 2);
    assert!(cal.delta_auc <= cfg.gap_bound);
    assert!(cal.test_auc > 0.9, "test AUC {}", cal.test_auc);
    assert!(cal.grid_lo >= 0.0 && cal.grid_hi <= 1.0);
    match cal.t_stat {
        Some(t) => {
            assert!((t - (cal.tau_bar - cal.grid_center) / (cal.se / 3f64.sqrt())).abs() < 1e-12);
            assert!(cal.p_value.unwrap() >= cfg.alpha);
        }
        None => assert!(cal.zero_variance && cal.se == 0.0),
    }
    let again = calibrate_channel("planted", &motif, &reps, &labels, &cfg).unwrap();
    assert_eq!(cal, again);
}

#[test]
fn impossible_gap_bound_hits_retry_cap() {
    let spec = SyntheticSpec::default();
    let source = true_source(&spec, 7).unwrap();
    let motif = Motif::new(vec![2, 2, 5]);
    let (reps, labels) = labelled_cohort(&spec, &source, &motif, 0.15, 60, 60, 7);
    let scores: Vec<f64> = reps.iter().map(|r| motif.activation(r)).collect();
    let cfg = TauConfig {
        gap_bound: -1.0,
        max_attempts: 4,
        ..TauConfig::default()
    };
    match calibrate_tau("noisy", &scores, &labels, &cfg) {
        Err(MotifError::NotConverged { attempts, last }) => {
            assert_eq!(attempts, 4);
            assert!(!last.pass);
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn tiny_calibration_fold_is_rejected() {
    let scores = vec![0.1, 0.9, 0.2, 0.8];
    let labels = vec![0, 1, 0, 1];
    assert!(matches!(
        calibrate_tau("tiny", &scores, &labels, &TauConfig::default()),
        Err(MotifError::TooSmall(_))
    ));
}
