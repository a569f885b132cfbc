use fastweight_core::seeds::stream;
use fastweight_motifs::fdr::{q_values, storey_pi0, storey_raw, STOREY_LAMBDA};
use proptest::prelude::*;
use rand::Rng;

fn step_up_oracle(p: &[f64], pi0: f64) -> Vec<f64> {
    let m = p.len();
    let mut sorted: Vec<(f64, usize)> = p.iter().cloned().zip(0..).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut q = vec![0.0; m];
    for i in 0..m {
        let best = (i..m).map(|j| pi0 * m as f64 * sorted[j].0 / (j + 1) as f64).fold(f64::INFINITY, f64::min);
        q[sorted[i].1] = best.min(1.0);
    }
    q
}

#[test]
fn ten_mixed_pvalues_match_step_up() {
    let p = [0.001, 0.8, 0.04, 0.3, 0.012, 0.67, 0.049, 0.95, 0.2, 0.03];
    let est = storey_pi0(&p, STOREY_LAMBDA, 500, 4).unwrap();
    // three of ten exceed one half
    assert!((est.raw - 0.6).abs() < 1e-15);
    let q = q_values(&p, est.pi0).unwrap();
    let oracle = step_up_oracle(&p, est.pi0);
    for (a, b) in q.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((q[0] - 0.6 * 10.0 * 0.001).abs() < 1e-15);
}

#[test]
fn storey_all_null_lands_in_range() {
    let seeds = 100;
    let hits = (0..seeds)
        .filter(|&s| {
            let mut rng = stream(s, "null-p", 0);
            let p: Vec<f64> = (0..200).map(|_| (rng.random_range(0..1000) + 1) as f64 / 1000.0).collect();
            let est = storey_pi0(&p, STOREY_LAMBDA, 200, s).unwrap();
            (0.8..=1.0).contains(&est.pi0)
        })
        .count();
    assert!(hits as f64 >= 0.9 * seeds as f64, "{hits}/{seeds}");
}

#[test]
fn bootstrap_interval_brackets_estimate() {
    let mut rng = stream(3, "mixed-p", 0);
    let p: Vec<f64> = (0..300)
        .map(|i| if i < 60 { rng.random::<f64>() * 0.01 + 1e-6 } else { rng.random::<f64>().max(1e-9) })
        .collect();
    let est = storey_pi0(&p, STOREY_LAMBDA, 2000, 8).unwrap();
    assert!(est.ci90.lo <= est.pi0 && est.pi0 <= est.ci90.hi);
    assert!(est.ci90.hi - est.ci90.lo < 0.3);
    assert_eq!(est.pi0, storey_raw(&p, STOREY_LAMBDA).unwrap().min(1.0));
}

#[test]
fn empty_and_out_of_range_inputs_fail() {
    assert!(storey_pi0(&[], 0.5, 10, 0).is_err());
    assert!(q_values(&[0.2, 1.5], 1.0).is_err());
    assert!(q_values(&[0.2], 1.2).is_err());
}

proptest! {
    #[test]
    fn q_values_follow_pvalue_order(p in prop::collection::vec(1e-6f64..=1.0, 1..80), pi0 in 0.0f64..=1.0) {
        let q = q_values(&p, pi0).unwrap();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(a.cmp(&b)));
        prop_assert!(idx.windows(2).all(|w| q[w[0]] <= q[w[1]] + 1e-15));
        let m = p.len() as f64;
        prop_assert!(q.iter().zip(&p).all(|(q, v)| *q <= (v * m).min(1.0) + 1e-12));
        let oracle = step_up_oracle(&p, pi0);
        prop_assert!(q.iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
