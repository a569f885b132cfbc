use fastweight_core::seeds::stream;
use fastweight_motifs::permutation::{PermutationConfig, DESK_PERMUTATION_FLOOR};
use fastweight_motifs::synthetic::{
    distinct_motifs, fitted_background, motif_test, true_source, MotifTestConfig, SyntheticSpec,
};

#[test]
fn pure_null_family_of_500() {
    let spec = SyntheticSpec::default();
    let mut false_calls = 0;
    let mut tested = 0;
    for seed in [42u64, 2023, 777] {
        let source = true_source(&spec, seed).unwrap();
        let background = fitted_background(&source, 5000, seed).unwrap();
        let motifs = distinct_motifs(500, 3, spec.n_symbols, seed).unwrap();
        let observed = source.sample_repertoire(spec.sequences_per_repertoire, &mut stream(seed, "observed", 0));
        let cfg = MotifTestConfig {
            top_frac: 1.0,
            permutation: PermutationConfig {
                b_min: DESK_PERMUTATION_FLOOR,
                ..PermutationConfig::default()
            },
            seed,
            ..MotifTestConfig::default()
        };
        let rep = motif_test(&observed, &motifs, &background, &cfg).unwrap();
        assert_eq!(rep.screened.len(), 500);
        assert!(rep.p_values.iter().all(|&p| p > 0.0 && p <= 1.0));
        assert!(rep.b_used.iter().all(|&b| b >= DESK_PERMUTATION_FLOOR));
        assert!((0.8..=1.0).contains(&rep.pi0.pi0), "seed {seed}: pi0 {}", rep.pi0.pi0);
        let mut order: Vec<usize> = (0..500).collect();
        order.sort_by(|&a, &b| rep.p_values[a].total_cmp(&rep.p_values[b]));
        assert!(order.windows(2).all(|w| rep.q_values[w[0]] <= rep.q_values[w[1]]));
        false_calls += rep.q_values.iter().filter(|&&q| q <= 0.1).count();
        tested += 500;
    }
    let rate = false_calls as f64 / tested as f64;
    assert!(rate <= 0.13, "false-positive rate {rate}");
}

#[test]
fn screening_shrinks_the_family() {
    let spec = SyntheticSpec::default();
    let source = true_source(&spec, 5).unwrap();
    let motifs = distinct_motifs(200, 3, spec.n_symbols, 5).unwrap();
    let observed = source.sample_repertoire(spec.sequences_per_repertoire, &mut stream(5, "observed", 0));
    let cfg = MotifTestConfig {
        permutation: PermutationConfig {
            b_min: 300,
            b_max: 300,
            ..PermutationConfig::default()
        },
        ..MotifTestConfig::default()
    };
    let rep = motif_test(&observed, &motifs, &source, &cfg).unwrap();
    assert_eq!(rep.screened.len(), 10);
    assert_eq!(rep.p_values.len(), 10);
    assert!(rep.discoveries.iter().all(|d| rep.screened.contains(d)));
}
