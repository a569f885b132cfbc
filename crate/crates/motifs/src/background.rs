use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::{MotifError, Result};

pub const DEFAULT_ORDER: usize = 2;
pub const DEFAULT_PSEUDOCOUNT: f64 = 0.5;
const MAX_CONTEXTS: usize = 1 << 22;

/// Symbols are indices into a declared alphabet `0..n_symbols`.
pub type Sequence = Vec<u8>;

/// Order-`p` Markov chain with a separate transition table per position.
/// Position `i` conditions on the previous `min(i, p)` symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovBackground {
    order: usize,
    n_symbols: usize,
    pseudocount: f64,
    /// `tables[i][context * n_symbols + symbol]`
    tables: Vec<Vec<f64>>,
    /// `(length, count)` pairs in increasing length.
    lengths: Vec<(usize, usize)>,
}

fn context_count(n_symbols: usize, len: usize) -> Result<usize> {
    let mut n = 1usize;
    for _ in 0..len {
        n = n.checked_mul(n_symbols).filter(|&v| v <= MAX_CONTEXTS).ok_or_else(|| {
            MotifError::InvalidConfig(format!("order {len} over {n_symbols} symbols has too many contexts"))
        })?;
    }
    Ok(n)
}

fn context_index(context: &[u8], n_symbols: usize) -> usize {
    context.iter().fold(0, |acc, &s| acc * n_symbols + s as usize)
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (s, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return s as u8;
        }
    }
    (row.len() - 1) as u8
}

impl MarkovBackground {
    /// Additive-pseudocount estimate. A context never seen with a zero
    /// pseudocount falls back to the uniform distribution.
    pub fn fit(sequences: &[Sequence], n_symbols: usize, order: usize, pseudocount: f64) -> Result<Self> {
        if sequences.is_empty() {
            return Err(MotifError::Empty("background corpus".into()));
        }
        if n_symbols == 0 || n_symbols > 256 {
            return Err(MotifError::InvalidConfig("alphabet size must lie in 1..=256".into()));
        }
        if !(pseudocount >= 0.0 && pseudocount.is_finite()) {
            return Err(MotifError::InvalidConfig("pseudocount must be finite and nonnegative".into()));
        }
        for (i, seq) in sequences.iter().enumerate() {
            if let Some(&s) = seq.iter().find(|&&s| s as usize >= n_symbols) {
                return Err(MotifError::UnknownSymbol { symbol: s, sequence: i });
            }
        }
        let max_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        if max_len == 0 {
            return Err(MotifError::Empty("every background sequence is empty".into()));
        }
        let mut counts: Vec<Vec<f64>> = (0..max_len)
            .map(|i| context_count(n_symbols, i.min(order)).map(|c| vec![0.0; c * n_symbols]))
            .collect::<Result<_>>()?;
        let mut length_counts = std::collections::BTreeMap::new();
        for seq in sequences {
            *length_counts.entry(seq.len()).or_insert(0usize) += 1;
            for i in 0..seq.len() {
                let ctx = &seq[i - i.min(order)..i];
                counts[i][context_index(ctx, n_symbols) * n_symbols + seq[i] as usize] += 1.0;
            }
        }
        let tables = counts
            .into_iter()
            .map(|table| {
                table
                    .chunks(n_symbols)
                    .flat_map(|row| {
                        let total: f64 = row.iter().sum::<f64>() + pseudocount * n_symbols as f64;
                        row.iter()
                            .map(move |c| if total > 0.0 { (c + pseudocount) / total } else { 1.0 / n_symbols as f64 })
                            .collect::<Vec<_>>()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            order,
            n_symbols,
            pseudocount,
            tables,
            lengths: length_counts.into_iter().collect(),
        })
    }

    /// Random chain whose full-order transition rows are shared across
    /// positions and drawn from a symmetric Dirichlet (normalized gammas).
    pub fn random<R: Rng + ?Sized>(
        n_symbols: usize,
        order: usize,
        lengths: &[(usize, usize)],
        concentration: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_symbols < 2 {
            return Err(MotifError::InvalidConfig("a random chain needs at least two symbols".into()));
        }
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| MotifError::InvalidConfig(format!("Dirichlet concentration: {e}")))?;
        let max_len = lengths.iter().filter(|(_, c)| *c > 0).map(|(l, _)| *l).max().unwrap_or(0);
        if max_len == 0 {
            return Err(MotifError::Empty("length distribution".into()));
        }
        let mut draw_table = |ctx_len: usize| -> Result<Vec<f64>> {
            let n_ctx = context_count(n_symbols, ctx_len)?;
            let mut table = Vec::with_capacity(n_ctx * n_symbols);
            for _ in 0..n_ctx {
                let row: Vec<f64> = (0..n_symbols).map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE)).collect();
                let total: f64 = row.iter().sum();
                table.extend(row.iter().map(|g| g / total));
            }
            Ok(table)
        };
        let shared = draw_table(order)?;
        let tables = (0..max_len)
            .map(|i| if i >= order { Ok(shared.clone()) } else { draw_table(i) })
            .collect::<Result<_>>()?;
        let mut lens: Vec<(usize, usize)> = lengths.iter().copied().filter(|(_, c)| *c > 0).collect();
        lens.sort_unstable();
        Ok(Self {
            order,
            n_symbols,
            pseudocount: 0.0,
            tables,
            lengths: lens,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    pub fn pseudocount(&self) -> f64 {
        self.pseudocount
    }

    pub fn max_len(&self) -> usize {
        self.tables.len()
    }

    pub fn lengths(&self) -> &[(usize, usize)] {
        &self.lengths
    }

    fn table_for(&self, position: usize) -> (usize, usize) {
        let t = position.min(self.tables.len() - 1);
        (t, t.min(self.order))
    }

    /// Conditional distribution at `position`; `history` is the whole prefix
    /// before it, of which only the last `min(position, order)` symbols count.
    pub fn conditional(&self, position: usize, history: &[u8]) -> &[f64] {
        let (t, ctx_len) = self.table_for(position);
        let ctx = &history[history.len() - ctx_len.min(history.len())..];
        let row = context_index(ctx, self.n_symbols);
        &self.tables[t][row * self.n_symbols..(row + 1) * self.n_symbols]
    }

    pub fn log_likelihood(&self, seq: &[u8]) -> f64 {
        (0..seq.len())
            .map(|i| self.conditional(i, &seq[..i])[seq[i] as usize].ln())
            .sum()
    }

    pub fn sample_length<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: usize = self.lengths.iter().map(|(_, c)| c).sum();
        let mut u = rng.random_range(0..total);
        for &(len, c) in &self.lengths {
            if u < c {
                return len;
            }
            u -= c;
        }
        self.lengths.last().map_or(0, |(l, _)| *l)
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Sequence {
        let mut seq = Vec::with_capacity(len);
        for i in 0..len {
            let s = sample_row(self.conditional(i, &seq), rng);
            seq.push(s);
        }
        seq
    }

    pub fn sample_repertoire<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Sequence> {
        (0..n)
            .map(|_| {
                let len = self.sample_length(rng);
                self.sample_sequence(len, rng)
            })
            .collect()
    }

    /// One fresh sequence per entry of `lengths`.
    pub fn sample_like<R: Rng + ?Sized>(&self, lengths: &[usize], rng: &mut R) -> Vec<Sequence> {
        lengths.iter().map(|&l| self.sample_sequence(l, rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fastweight_core::seeds::rng_from;

    #[test]
    fn order_zero_frequencies() {
        let bg = MarkovBackground::fit(&[vec![0, 0, 0, 1]], 2, 0, 0.0).unwrap();
        // every position has its own table; pool them by refitting on columns
        assert_eq!(bg.conditional(0, &[]), &[1.0, 0.0]);
        let pooled = MarkovBackground::fit(&[vec![0], vec![0], vec![0], vec![1]], 2, 0, 0.0).unwrap();
        assert_eq!(pooled.conditional(0, &[]), &[0.75, 0.25]);
        let single = MarkovBackground::fit(&[vec![0, 0, 0]], 1, 0, 0.5).unwrap();
        assert!((0..3).all(|i| single.conditional(i, &[]) == [1.0]));
    }

    #[test]
    fn rejects_symbols_outside_alphabet() {
        assert_eq!(
            MarkovBackground::fit(&[vec![0, 1], vec![3]], 3, 1, 0.5),
            Err(MotifError::UnknownSymbol { symbol: 3, sequence: 1 })
        );
    }

    #[test]
    fn sampling_respects_lengths() {
        let mut rng = rng_from(1);
        let bg = MarkovBackground::random(4, 2, &[(5, 1), (7, 3)], 1.0, &mut rng).unwrap();
        let rep = bg.sample_repertoire(200, &mut rng);
        assert!(rep.iter().all(|s| s.len() == 5 || s.len() == 7));
        assert!(rep.iter().flatten().all(|&s| s < 4));
        let like = bg.sample_like(&[3, 9], &mut rng);
        assert_eq!(like.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 9]);
    }
}
