use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::background::Sequence;
use crate::{MotifError, Result};

pub const DEFAULT_MOTIF_LEN: usize = 3;
pub const DEFAULT_TOP_FRAC: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Motif {
    pub symbols: Vec<u8>,
}

impl Motif {
    pub fn new(symbols: Vec<u8>) -> Self {
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn label(&self) -> String {
        self.symbols.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-")
    }

    /// Best fraction of matching positions over all full-length windows;
    /// zero for sequences shorter than the motif.
    pub fn window_score(&self, seq: &[u8]) -> f64 {
        let k = self.symbols.len();
        if k == 0 || seq.len() < k {
            return 0.0;
        }
        let mut best = 0usize;
        for window in seq.windows(k) {
            let hits = window.iter().zip(&self.symbols).filter(|(a, b)| a == b).count();
            if hits > best {
                best = hits;
                if best == k {
                    break;
                }
            }
        }
        best as f64 / k as f64
    }

    /// Mean window score over a repertoire.
    pub fn activation(&self, repertoire: &[Sequence]) -> f64 {
        if repertoire.is_empty() {
            return 0.0;
        }
        repertoire.iter().map(|s| self.window_score(s)).sum::<f64>() / repertoire.len() as f64
    }

    /// Overwrites a random window of `seq` with the motif.
    pub fn plant<R: Rng + ?Sized>(&self, seq: &mut [u8], rng: &mut R) {
        let k = self.symbols.len();
        if k == 0 || seq.len() < k {
            return;
        }
        let start = rng.random_range(0..=seq.len() - k);
        seq[start..start + k].copy_from_slice(&self.symbols);
    }
}

/// `activations[channel][repertoire]`.
pub fn activation_matrix(motifs: &[Motif], repertoires: &[Vec<Sequence>]) -> Vec<Vec<f64>> {
    use rayon::prelude::*;
    motifs
        .par_iter()
        .map(|m| repertoires.iter().map(|r| m.activation(r)).collect())
        .collect()
}

/// Channels whose maximal activation ranks in the top `top_frac`, returned in
/// increasing index order. The count is `ceil(top_frac * channels)`; ties in
/// activation go to the lower index.
pub fn screen_channels(activations: &[Vec<f64>], top_frac: f64) -> Result<Vec<usize>> {
    if activations.is_empty() || activations.iter().any(Vec::is_empty) {
        return Err(MotifError::Empty("activation matrix".into()));
    }
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(MotifError::InvalidConfig("top_frac must lie in (0, 1]".into()));
    }
    if activations.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MotifError::NonFinite("activation matrix".into()));
    }
    let peaks: Vec<f64> = activations
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let n_keep = ((top_frac * peaks.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    order.sort_by(|&a, &b| peaks[b].total_cmp(&peaks[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.into_iter().take(n_keep).collect();
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_scores() {
        let m = Motif::new(vec![1, 2, 3]);
        assert_eq!(m.window_score(&[0, 1, 2, 3, 0]), 1.0);
        assert!((m.window_score(&[1, 2, 0, 0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.window_score(&[1, 2]), 0.0);
        assert_eq!(m.window_score(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn screen_examples() {
        let acts = vec![vec![0.1, 0.2], vec![0.9, 0.1], vec![0.3, 0.3]];
        assert_eq!(screen_channels(&acts, 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(screen_channels(&acts, 0.1).unwrap(), vec![1]);
        assert!(screen_channels(&[], 0.5).is_err());
        assert!(screen_channels(&acts, 0.0).is_err());
    }
}
