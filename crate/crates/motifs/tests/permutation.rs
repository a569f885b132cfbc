use fastweight_core::seeds::stream;
use fastweight_motifs::permutation::{
    exhaustive_pvalue, permutation_pvalue, test_motifs, PermutationConfig, DESK_PERMUTATION_FLOOR,
    PRODUCTION_PERMUTATION_FLOOR,
};
use fastweight_motifs::synthetic::{distinct_motifs, true_source, SyntheticSpec};
use rand::Rng;

const DIFFS: [f64; 3] = [1.2, -0.4, 0.9];

fn signed_sum(signs: [f64; 3]) -> f64 {
    signs.iter().zip(DIFFS).map(|(s, d)| s * d).sum()
}

fn all_flips() -> Vec<f64> {
    (0..8u32)
        .map(|m| signed_sum([0, 1, 2].map(|b| if m >> b & 1 == 1 { -1.0 } else { 1.0 })))
        .collect()
}

#[test]
fn eight_sign_flips_match_enumeration() {
    let observed = signed_sum([1.0; 3]);
    // sums: 1.7, -0.7, 2.5, -1.5, 0.1, -2.3, 0.9, -3.1; two of eight reach 1.7
    assert_eq!(exhaustive_pvalue(observed, &all_flips()).unwrap(), 2.0 / 8.0);
    assert_eq!(exhaustive_pvalue(signed_sum([1.0, -1.0, 1.0]), &all_flips()).unwrap(), 1.0 / 8.0);
}

#[test]
fn monte_carlo_flips_converge_to_enumeration() {
    let observed = signed_sum([1.0; 3]);
    let exact = exhaustive_pvalue(observed, &all_flips()).unwrap();
    let cfg = PermutationConfig {
        b_min: 20_000,
        b_max: 20_000,
        seed: 5,
        ..PermutationConfig::default()
    };
    let res = permutation_pvalue(
        observed,
        |i| {
            let mut rng = stream(cfg.seed, "flip", i);
            signed_sum([0; 3].map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
        },
        &cfg,
    )
    .unwrap();
    let sigma = (exact * (1.0 - exact) / 20_000.0).sqrt();
    assert_eq!(res.b_used, 20_000);
    assert!((res.p_value - exact).abs() < 3.0 * sigma, "{} vs {exact}", res.p_value);
}

#[test]
fn floors_are_documented_constants() {
    assert_eq!(PRODUCTION_PERMUTATION_FLOOR, 50_000);
    assert_eq!(DESK_PERMUTATION_FLOOR, 2_000);
    assert_eq!(PermutationConfig::default().b_min, DESK_PERMUTATION_FLOOR);
    assert!(PermutationConfig { b_min: 0, ..PermutationConfig::default() }.validate().is_err());
}

#[test]
fn adaptive_stopping_respects_floor_and_cap() {
    let cfg = PermutationConfig {
        b_min: 1000,
        b_max: 4000,
        block: 250,
        stability: 0.01,
        seed: 3,
    };
    let res = permutation_pvalue(0.3, |i| stream(9, "u", i).random::<f64>(), &cfg).unwrap();
    assert!(res.b_used >= 1000 && res.b_used <= 4000);
    assert!(res.stable);
    let tight = PermutationConfig { stability: 1e-12, ..cfg };
    let capped = permutation_pvalue(0.3, |i| stream(9, "u", i).random::<f64>(), &tight).unwrap();
    assert_eq!(capped.b_used, 4000);
    assert!(!capped.stable);
}

#[test]
fn null_pvalues_are_super_uniform() {
    let spec = SyntheticSpec::default();
    let source = true_source(&spec, 2023).unwrap();
    let motifs = distinct_motifs(400, 3, spec.n_symbols, 8).unwrap();
    let n = motifs.len();
    let p: Vec<f64> = motifs
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rng = stream(77, "observed", i as u64);
            let observed = source.sample_repertoire(spec.sequences_per_repertoire, &mut rng);
            let cfg = PermutationConfig {
                b_min: 500,
                b_max: 500,
                seed: 1000 + i as u64,
                ..PermutationConfig::default()
            };
            test_motifs(&observed, std::slice::from_ref(m), &source, &cfg).unwrap()[0].p_value
        })
        .collect();
    for t in [0.01, 0.05, 0.1] {
        let ecdf = p.iter().filter(|&&v| v <= t).count() as f64 / n as f64;
        let slack = 3.0 * (t * (1.0 - t) / n as f64).sqrt();
        assert!(ecdf <= t + slack, "ECDF({t}) = {ecdf}");
    }
    assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
}
