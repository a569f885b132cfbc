use fastweight_core::seeds::rng_from;
use fastweight_motifs::channels::{activation_matrix, screen_channels, Motif};
use proptest::prelude::*;
use rand::Rng;

fn sort_oracle(acts: &[Vec<f64>], n_keep: usize) -> Vec<usize> {
    let mut peaks: Vec<(f64, usize)> = acts
        .iter()
        .enumerate()
        .map(|(i, row)| (row.iter().cloned().fold(f64::MIN, f64::max), i))
        .collect();
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = peaks[..n_keep].iter().map(|p| p.1).collect();
    keep.sort();
    keep
}

#[test]
fn hundred_channels_top_five_percent() {
    let mut rng = rng_from(11);
    let acts: Vec<Vec<f64>> = (0..100).map(|_| (0..12).map(|_| rng.random::<f64>()).collect()).collect();
    let got = screen_channels(&acts, 0.05).unwrap();
    assert_eq!(got.len(), 5);
    assert_eq!(got, sort_oracle(&acts, 5));
}

#[test]
fn ties_prefer_lower_index() {
    let acts = vec![vec![0.5], vec![0.9], vec![0.9], vec![0.9]];
    assert_eq!(screen_channels(&acts, 0.5).unwrap(), vec![1, 2]);
}

#[test]
fn dominating_channel_and_full_fraction() {
    let mut acts = vec![vec![0.2, 0.1]; 30];
    acts[17] = vec![0.1, 0.95];
    assert_eq!(screen_channels(&acts, 0.01).unwrap(), vec![17]);
    assert_eq!(screen_channels(&acts, 1.0).unwrap(), (0..30).collect::<Vec<_>>());
}

#[test]
fn activation_matrix_layout() {
    let motifs = vec![Motif::new(vec![0, 1]), Motif::new(vec![2, 2])];
    let reps = vec![vec![vec![0, 1, 2]], vec![vec![2, 2, 0], vec![0, 0]]];
    let m = activation_matrix(&motifs, &reps);
    // [2,2,0] has no partial match of 0-1, [0,0] matches half
    assert_eq!(m, vec![vec![1.0, 0.25], vec![0.5, 0.5]]);
}

proptest! {
    #[test]
    fn screened_subset_with_ceiling_size(
        acts in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..60),
        frac in 0.01f64..=1.0,
    ) {
        let got = screen_channels(&acts, frac).unwrap();
        let expect = (frac * acts.len() as f64 - 1e-9).ceil().max(1.0) as usize;
        prop_assert_eq!(got.len(), expect);
        prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(got.iter().all(|&i| i < acts.len()));
        prop_assert_eq!(got, sort_oracle(&acts, expect));
    }
}
