//! Evaluation metrics: token edit distance, the interpolation edit-distance
//! ratio R(J) and left-contextual reconstruction accuracy. The language-model
//! NLL lives next to the language model in [`crate::lm`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::Context;
use crate::error::{ClsmError, Result};
use crate::sampler::{interpolate_contextual, ContextualModel, DecodeStrategy};
use crate::span::SpanGrid;
use crate::tokens::Token;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// One interpolation path reduced to its edit distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    /// `d(x(j/J), x((j+1)/J))` for `j = 0..J`.
    pub adjacent: Vec<usize>,
    /// `D = d(x(0), x(1))`.
    pub endpoint: usize,
    /// Adjacent pairs with distance zero.
    pub n_zero: usize,
    /// `None` when `D * (J - n) = 0` and the path is excluded.
    pub ratio: Option<f64>,
}

impl PathStats {
    pub fn new(adjacent: Vec<usize>, endpoint: usize) -> Self {
        let j = adjacent.len();
        let n_zero = adjacent.iter().filter(|&&d| d == 0).count();
        let denom = endpoint * (j - n_zero);
        let ratio = (denom > 0).then(|| adjacent.iter().sum::<usize>() as f64 / denom as f64);
        Self { adjacent, endpoint, n_zero, ratio }
    }

    /// Edit distances along a path of `J + 1` sequences.
    pub fn from_sequences<S: AsRef<[Token]>>(seqs: &[S]) -> Self {
        let adjacent = seqs.windows(2).map(|w| edit_distance(w[0].as_ref(), w[1].as_ref())).collect();
        let endpoint = edit_distance(seqs[0].as_ref(), seqs[seqs.len() - 1].as_ref());
        Self::new(adjacent, endpoint)
    }

    /// `1 / (J - n)`, the triangle-inequality floor of the ratio.
    pub fn lower_bound(&self) -> f64 {
        1.0 / (self.adjacent.len() - self.n_zero).max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IedrReport {
    pub j: usize,
    pub ratio: f64,
    /// Zero adjacent distances summed over evaluated paths.
    pub n_excluded_pairs: usize,
    pub n_excluded_paths: usize,
    pub n_paths: usize,
    /// Evaluated paths whose ratio fell below `1 / (J - n)`; always 0 for a
    /// true metric.
    pub bound_violations: usize,
}

/// Mean per-path ratio over paths that survive the exclusion rule.
pub fn iedr_from_paths(j: usize, paths: &[PathStats]) -> Result<IedrReport> {
    let mut sum = 0.0;
    let (mut n_paths, mut excluded, mut zero_pairs, mut violations) = (0, 0, 0, 0);
    for p in paths {
        if p.adjacent.len() != j {
            return Err(ClsmError::InvalidInput(format!("path with {} steps for J = {j}", p.adjacent.len())));
        }
        match p.ratio {
            Some(r) => {
                sum += r;
                n_paths += 1;
                zero_pairs += p.n_zero;
                if r < p.lower_bound() {
                    violations += 1;
                }
            }
            None => excluded += 1,
        }
    }
    if n_paths == 0 {
        return Err(ClsmError::EmptyEvaluation);
    }
    Ok(IedrReport {
        j,
        ratio: sum / n_paths as f64,
        n_excluded_pairs: zero_pairs,
        n_excluded_paths: excluded,
        n_paths,
        bound_violations: violations,
    })
}

/// Edit-distance paths for one `(z1, z2)` prior pair per context, measured on
/// the target subsequences only.
pub fn interpolation_paths<M: ContextualModel + ?Sized>(
    model: &M,
    contexts: &[Context],
    j: usize,
    seed: u64,
) -> Result<Vec<PathStats>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    contexts
        .iter()
        .map(|c| {
            let z1 = model.sample_latent(c, &mut rng)?;
            let z2 = model.sample_latent(c, &mut rng)?;
            let (_, seqs) = interpolate_contextual(model, &z1, &z2, j, c, DecodeStrategy::Greedy)?;
            let targets: Vec<&[Token]> = seqs.iter().map(|s| &s[c.span.start..c.span.end()]).collect();
            Ok(PathStats::from_sequences(&targets))
        })
        .collect()
}

pub fn interpolation_edit_distance_ratio<M: ContextualModel + ?Sized>(
    model: &M,
    contexts: &[Context],
    j: usize,
    seed: u64,
) -> Result<IedrReport> {
    iedr_from_paths(j, &interpolation_paths(model, contexts, j, seed)?)
}

/// Contexts for evaluation: one span per window drawn uniformly from the grid.
pub fn sample_contexts<S: AsRef<[Token]>>(windows: &[S], grid: &SpanGrid, left_only: bool, seed: u64) -> Result<Vec<Context>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows
        .iter()
        .map(|w| {
            let span = if left_only { grid.sample_left_only(&mut rng) } else { grid.sample(&mut rng) };
            Context::from_window(w.as_ref(), span)
        })
        .collect()
}

/// Fraction of target tokens reproduced exactly when the target ends the
/// window, decoding greedily from the posterior mean.
pub fn left_contextual_recon_accuracy<M: ContextualModel + ?Sized, S: AsRef<[Token]>>(
    model: &M,
    windows: &[S],
    grid: &SpanGrid,
    seed: u64,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(ClsmError::EmptyEvaluation);
    }
    let contexts = sample_contexts(windows, grid, true, seed)?;
    let mut scores = Vec::with_capacity(windows.len());
    for (w, c) in windows.iter().zip(&contexts) {
        let truth = &w.as_ref()[c.span.start..c.span.end()];
        let z = model.posterior_mean(w.as_ref(), c.span)?;
        let got = model.decode_targets(&z, c, DecodeStrategy::Greedy)?;
        scores.push(token_accuracy(&got[0], truth));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Fraction of positions where `got` equals `truth`.
pub fn token_accuracy(got: &[Token], truth: &[Token]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    got.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::parse_seq;
    use proptest::prelude::*;

    /// Exponential-time textbook recursion.
    fn naive(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = naive(ra, rb) + usize::from(x != y);
                sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
            }
        }
    }

    fn all_strings(max: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut layer = vec![vec![]];
        for _ in 0..max {
            layer = layer
                .iter()
                .flat_map(|s: &Vec<u8>| (0..3u8).map(move |c| [s.clone(), vec![c]].concat()))
                .collect();
            out.extend(layer.clone());
        }
        out
    }

    #[test]
    fn examples() {
        let a = parse_seq("60 __ R").unwrap();
        let b = parse_seq("60 62 R").unwrap();
        assert_eq!(edit_distance(&a, &a), 0);
        assert_eq!(edit_distance(&a, &b), 1);
        assert_eq!(edit_distance(&[], &a), 3);
    }

    #[test]
    fn matches_naive_recursion_up_to_length_four() {
        // the full length-6 sweep runs in the acceptance suite
        let all = all_strings(4);
        for a in &all {
            for b in &all {
                assert_eq!(edit_distance(a, b), naive(a, b), "{a:?} {b:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn metric_axioms(a in proptest::collection::vec(0u8..4, 0..12),
                         b in proptest::collection::vec(0u8..4, 0..12),
                         c in proptest::collection::vec(0u8..4, 0..12)) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
        }
    }

    #[test]
    fn hand_computed_ratios() {
        let p = PathStats::new(vec![1, 1], 2);
        assert_eq!(p.ratio, Some(0.5));
        let p = PathStats::new(vec![2, 0, 2, 0], 4);
        assert_eq!(p.n_zero, 2);
        assert_eq!(p.ratio, Some(0.5));
        let r = iedr_from_paths(4, &[p]).unwrap();
        assert_eq!((r.ratio, r.n_paths, r.n_excluded_pairs), (0.5, 1, 2));
    }

    #[test]
    fn constant_path_is_excluded() {
        let p = PathStats::new(vec![0, 0], 0);
        assert_eq!(p.ratio, None);
        assert!(matches!(iedr_from_paths(2, &[p.clone()]), Err(ClsmError::EmptyEvaluation)));
        let r = iedr_from_paths(2, &[p, PathStats::new(vec![1, 1], 2)]).unwrap();
        assert_eq!((r.n_excluded_paths, r.n_paths), (1, 1));
    }

    proptest! {
        #[test]
        fn ratio_respects_triangle_floor(seqs in proptest::collection::vec(proptest::collection::vec(0u8..3, 0..8), 3..10)) {
            let adjacent: Vec<usize> = seqs.windows(2).map(|w| edit_distance(&w[0], &w[1])).collect();
            let endpoint = edit_distance(&seqs[0], &seqs[seqs.len() - 1]);
            let p = PathStats::new(adjacent, endpoint);
            if let Some(r) = p.ratio {
                prop_assert!(r >= p.lower_bound() - 1e-12);
            }
        }
    }

    #[test]
    fn accuracy_counts_targets_only() {
        let t = parse_seq("60 __ R R").unwrap();
        let g = parse_seq("60 R R 62").unwrap();
        assert_eq!(token_accuracy(&g, &t), 0.5);
        assert_eq!(token_accuracy(&t, &t), 1.0);
    }
}
