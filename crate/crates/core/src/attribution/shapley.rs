//! Shapley values over posts, by permutation sampling and by exact subset
//! enumeration.
//!
//! A player is a whole post; masking a post zeroes its embedding and stance
//! rows while the graph structure stays intact. The value function is the
//! target-class logit.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::diffcore::Tensor;
use crate::ingest::{EmbeddedThread, VeracityLabel};
use crate::verifier::ModelParams;

use super::{
    thread_features, verifier_scorer, AttributionError, AttributionMeta, AttributionMethod,
    AttributionResult, ScoreModel,
};

/// Exact enumeration is refused above this thread size (2^l evaluations).
pub const EXACT_ENUMERATION_LIMIT: usize = 12;

/// Memoizing value-function evaluator over unmasked-post subsets.
struct CoalitionValue<'m, M: ScoreModel> {
    model: &'m M,
    embeddings: &'m Tensor,
    stance: &'m Tensor,
    cache: HashMap<Vec<u64>, f64>,
}

impl<'m, M: ScoreModel> CoalitionValue<'m, M> {
    fn new(model: &'m M, embeddings: &'m Tensor, stance: &'m Tensor) -> Self {
        Self {
            model,
            embeddings,
            stance,
            cache: HashMap::new(),
        }
    }

    fn key(keep: &[bool]) -> Vec<u64> {
        let mut words = vec![0u64; keep.len().div_ceil(64)];
        for (i, &k) in keep.iter().enumerate() {
            if k {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        words
    }

    fn value(&mut self, keep: &[bool]) -> Result<f64, AttributionError> {
        let key = Self::key(keep);
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let mut emb = self.embeddings.clone();
        let mut stance = self.stance.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                emb.row_mut(i).fill(0.0);
                stance.row_mut(i).fill(0.0);
            }
        }
        let v = self.model.score(&emb, &stance)?;
        self.cache.insert(key, v);
        Ok(v)
    }

    fn evaluations(&self) -> usize {
        self.cache.len()
    }
}

/// Permutation-sampling estimate of per-post Shapley values: the marginal
/// contribution of a post is the value with it unmasked (after the posts
/// preceding it in the permutation) minus the value without it.
pub fn shapley_sampling_core(
    model: &impl ScoreModel,
    embeddings: &Tensor,
    stance: &Tensor,
    permutations: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64, f64), AttributionError> {
    if permutations == 0 {
        return Err(AttributionError::Invalid(
            "permutations must be at least 1".into(),
        ));
    }
    let l = model.n_posts();
    let mut values = CoalitionValue::new(model, embeddings, stance);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut totals = vec![0.0; l];
    let mut order: Vec<usize> = (0..l).collect();
    let mut keep = vec![false; l];

    for _ in 0..permutations {
        order.shuffle(&mut rng);
        keep.fill(false);
        let mut previous = values.value(&keep)?;
        for &post in &order {
            keep[post] = true;
            let current = values.value(&keep)?;
            totals[post] += current - previous;
            previous = current;
        }
    }
    let phi: Vec<f64> = totals.into_iter().map(|t| t / permutations as f64).collect();
    let full = values.value(&vec![true; l])?;
    let empty = values.value(&vec![false; l])?;
    Ok((phi, full, empty))
}

/// Exact Shapley values by full subset enumeration; 2^l evaluations, refused
/// above [`EXACT_ENUMERATION_LIMIT`] posts.
pub fn shapley_exact_core(
    model: &impl ScoreModel,
    embeddings: &Tensor,
    stance: &Tensor,
) -> Result<(Vec<f64>, f64, f64), AttributionError> {
    let l = model.n_posts();
    if l > EXACT_ENUMERATION_LIMIT {
        return Err(AttributionError::TooManyPosts(l));
    }

    // v(S) for every subset, indexed by bitmask.
    let mut subset_value = vec![0.0; 1 << l];
    let mut values = CoalitionValue::new(model, embeddings, stance);
    let mut keep = vec![false; l];
    for mask in 0..(1usize << l) {
        for (i, k) in keep.iter_mut().enumerate() {
            *k = (mask >> i) & 1 == 1;
        }
        subset_value[mask] = values.value(&keep)?;
    }
    debug_assert_eq!(values.evaluations(), 1 << l);

    let mut factorial = vec![1.0f64; l + 1];
    for i in 1..=l {
        factorial[i] = factorial[i - 1] * i as f64;
    }

    let mut phi = vec![0.0; l];
    for (post, slot) in phi.iter_mut().enumerate() {
        let bit = 1usize << post;
        for mask in 0..(1usize << l) {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = factorial[s] * factorial[l - s - 1] / factorial[l];
            *slot += weight * (subset_value[mask | bit] - subset_value[mask]);
        }
    }
    let full = subset_value[(1 << l) - 1];
    let empty = subset_value[0];
    Ok((phi, full, empty))
}

fn result_from_phi(
    method_meta: AttributionMeta,
    target: VeracityLabel,
    phi: Vec<f64>,
) -> AttributionResult {
    AttributionResult::from_scores(
        AttributionMethod::ShapleyValues,
        target,
        None,
        phi,
        method_meta,
    )
}

/// Sampling-based Shapley attribution for a thread against the verifier.
pub fn shapley_sampling(
    params: &ModelParams,
    thread: &EmbeddedThread,
    target: VeracityLabel,
    permutations: usize,
    seed: u64,
) -> Result<AttributionResult, AttributionError> {
    let started = Instant::now();
    let (embeddings, stance) = thread_features(thread)?;
    let scorer = verifier_scorer(params, thread, target)?;
    let (phi, full, empty) =
        shapley_sampling_core(&scorer, &embeddings, &stance, permutations, seed)?;
    let meta = AttributionMeta {
        permutations: Some(permutations),
        seed: Some(seed),
        score_at_input: Some(full),
        score_at_baseline: Some(empty),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        ..Default::default()
    };
    Ok(result_from_phi(meta, target, phi))
}

/// Exact Shapley attribution for a thread against the verifier.
pub fn shapley_exact(
    params: &ModelParams,
    thread: &EmbeddedThread,
    target: VeracityLabel,
) -> Result<AttributionResult, AttributionError> {
    let started = Instant::now();
    let (embeddings, stance) = thread_features(thread)?;
    let scorer = verifier_scorer(params, thread, target)?;
    let (phi, full, empty) = shapley_exact_core(&scorer, &embeddings, &stance)?;
    let meta = AttributionMeta {
        exact: true,
        score_at_input: Some(full),
        score_at_baseline: Some(empty),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        ..Default::default()
    };
    Ok(result_from_phi(meta, target, phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::test_stubs::AdditiveGame;

    fn ones(rows: usize, cols: usize) -> Tensor {
        Tensor::from_flat(rows, cols, vec![1.0; rows * cols]).unwrap()
    }

    #[test]
    fn additive_game_recovers_contributions_for_any_sample_count() {
        let game = AdditiveGame {
            contributions: vec![2.0, -1.0, 0.5, 3.0],
        };
        let emb = ones(4, 2);
        let stance = ones(4, 1);
        for m in [1, 3, 17] {
            let (phi, ..) = shapley_sampling_core(&game, &emb, &stance, m, 7).unwrap();
            for (p, c) in phi.iter().zip(&game.contributions) {
                assert!((p - c).abs() <= 1e-12, "{p} vs {c}");
            }
        }
    }

    #[test]
    fn exact_satisfies_efficiency() {
        let game = AdditiveGame {
            contributions: vec![1.0, 2.0, 3.0],
        };
        let emb = ones(3, 2);
        let stance = ones(3, 1);
        let (phi, full, empty) = shapley_exact_core(&game, &emb, &stance).unwrap();
        let sum: f64 = phi.iter().sum();
        assert!((sum - (full - empty)).abs() <= 1e-9);
    }

    #[test]
    fn single_player_value_is_the_score_difference() {
        let game = AdditiveGame {
            contributions: vec![4.5],
        };
        let emb = ones(1, 2);
        let stance = ones(1, 1);
        let (phi, full, empty) = shapley_exact_core(&game, &emb, &stance).unwrap();
        assert_eq!(phi.len(), 1);
        assert!((phi[0] - (full - empty)).abs() <= 1e-12);
    }

    #[test]
    fn exact_refuses_large_threads() {
        let game = AdditiveGame {
            contributions: vec![0.0; 13],
        };
        let emb = ones(13, 1);
        let stance = ones(13, 1);
        assert!(matches!(
            shapley_exact_core(&game, &emb, &stance),
            Err(AttributionError::TooManyPosts(13))
        ));
    }

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let game = AdditiveGame {
            contributions: vec![1.0, 2.0, 3.0, 4.0, 5.0],
        };
        let emb = ones(5, 2);
        let stance = ones(5, 1);
        let (a, ..) = shapley_sampling_core(&game, &emb, &stance, 50, 11).unwrap();
        let (b, ..) = shapley_sampling_core(&game, &emb, &stance, 50, 11).unwrap();
        assert_eq!(a, b);
    }
}
