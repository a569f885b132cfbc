use fastweight_motifs::fdr::power_curve;
use fastweight_motifs::permutation::PermutationConfig;
use fastweight_motifs::synthetic::{power_family, true_source, SyntheticSpec};
use fastweight_motifs::Motif;

const ALPHA: f64 = 0.05;
const REPS: usize = 400;

fn curve(effects: &[f64], seed: u64) -> Vec<fastweight_motifs::fdr::PowerPoint> {
    let spec = SyntheticSpec::default();
    let source = true_source(&spec, 42).unwrap();
    let motif = Motif::new(vec![3, 0, 5]);
    let perm = PermutationConfig {
        b_min: 400,
        b_max: 400,
        ..PermutationConfig::default()
    };
    power_curve(effects, ALPHA, REPS, seed, |effect, s| {
        power_family(&spec, &source, &motif, &[], effect, &perm, s)
    })
    .unwrap()
}

#[test]
fn null_and_saturated_effects() {
    let pts = curve(&[0.0, 0.9], 1);
    let sigma = (ALPHA * (1.0 - ALPHA) / REPS as f64).sqrt();
    assert!((pts[0].detection_rate - ALPHA).abs() <= 3.0 * sigma, "null rate {}", pts[0].detection_rate);
    assert_eq!(pts[0].planted, REPS);
    assert!(pts[1].detection_rate > 0.99, "saturated rate {}", pts[1].detection_rate);
}

#[test]
fn mid_effect_replicates_across_seeds() {
    let a = curve(&[0.1], 11)[0].detection_rate;
    let b = curve(&[0.1], 12)[0].detection_rate;
    let pooled = 0.5 * (a + b);
    let sigma = (2.0 * pooled * (1.0 - pooled) / REPS as f64).sqrt();
    assert!(pooled > 0.1 && pooled < 0.95, "mid effect should be informative, got {pooled}");
    assert!((a - b).abs() <= 3.0 * sigma, "{a} vs {b}");
}

#[test]
fn empty_effect_grid_fails() {
    assert!(power_curve(&[], ALPHA, 10, 0, |_, _| Ok(vec![(0.5, true)])).is_err());
}
