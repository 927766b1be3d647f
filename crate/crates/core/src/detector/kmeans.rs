//! Two-center K-means under cosine distance.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const IDENTICAL_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Unit-norm centers.
    pub centers: [Vec<f64>; 2],
    /// Per-embedding assigned center, 0 or 1.
    pub assignment: Vec<usize>,
    /// Final objective: sum of (1 - e . c_assigned).
    pub objective: f64,
    pub iterations: usize,
}

/// All embeddings coincide; the caller maps this to an all-uncorrupted mask.
#[derive(Debug, Clone)]
pub enum KmeansOutcome {
    Clustered(KmeansResult),
    Degenerate,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n < IDENTICAL_EPS {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Initial centers: the mutually most-dissimilar pair among `candidates`
/// seeded random picks (fewer if the input is smaller).
fn auto_init(embeddings: &[Vec<f64>], candidates: usize, seed: u64) -> [Vec<f64>; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = embeddings.len();
    let picks: Vec<usize> = if n <= candidates {
        (0..n).collect()
    } else {
        (0..candidates).map(|_| rng.random_range(0..n)).collect()
    };
    let mut best = (picks[0], picks[picks.len() - 1]);
    let mut best_sim = f64::INFINITY;
    for (ai, &a) in picks.iter().enumerate() {
        for &b in &picks[ai + 1..] {
            let s = dot(&embeddings[a], &embeddings[b]);
            if s < best_sim {
                best_sim = s;
                best = (a, b);
            }
        }
    }
    [embeddings[best.0].clone(), embeddings[best.1].clone()]
}

/// Cluster unit-norm embeddings into two groups by cosine distance (1 - dot).
///
/// Assignment picks the nearer center, centers are recomputed as renormalized
/// means, and the loop stops when assignments stabilize or `max_iter` passes.
/// The objective is checked non-increasing every iteration.
pub fn kmeans_cosine(
    embeddings: &[Vec<f64>],
    init: Option<[Vec<f64>; 2]>,
    max_iter: usize,
    candidates: usize,
    seed: u64,
) -> Result<KmeansOutcome> {
    if embeddings.len() < 2 {
        return Err(Error::contract("kmeans_cosine needs at least 2 embeddings"));
    }
    if max_iter == 0 {
        return Err(Error::contract("kmeans_cosine needs max_iter >= 1"));
    }
    let first = &embeddings[0];
    let spread = embeddings
        .iter()
        .flat_map(|e| e.iter().zip(first).map(|(a, b)| (a - b).abs()))
        .fold(0.0f64, f64::max);
    if spread <= IDENTICAL_EPS {
        return Ok(KmeansOutcome::Degenerate);
    }

    let mut centers = init.unwrap_or_else(|| auto_init(embeddings, candidates, seed));
    let mut assignment = vec![0usize; embeddings.len()];
    let mut prev_objective = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        let mut objective = 0.0;
        for (i, e) in embeddings.iter().enumerate() {
            let s0 = dot(e, &centers[0]);
            let s1 = dot(e, &centers[1]);
            let a = if s1 > s0 { 1 } else { 0 };
            if assignment[i] != a {
                assignment[i] = a;
                changed = true;
            }
            objective += 1.0 - s0.max(s1);
        }
        assert!(
            objective <= prev_objective + 1e-9,
            "k-means objective increased: {prev_objective} -> {objective}"
        );
        prev_objective = objective;
        if !changed && iterations > 1 {
            break;
        }
        for c in 0..2 {
            let mut mean = vec![0.0; embeddings[0].len()];
            let mut count = 0usize;
            for (e, &a) in embeddings.iter().zip(&assignment) {
                if a == c {
                    for (m, v) in mean.iter_mut().zip(e) {
                        *m += v;
                    }
                    count += 1;
                }
            }
            // empty cluster or zero mean: keep the previous center
            if count > 0 && normalize(&mut mean) {
                centers[c] = mean;
            }
        }
    }
    Ok(KmeansOutcome::Clustered(KmeansResult {
        centers,
        assignment,
        objective: prev_objective,
        iterations,
    }))
}
