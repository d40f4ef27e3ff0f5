//! Lloyd's k-means with k-means++ seeding.
//!
//! Lloyd iterations are followed by Hartigan refinement: a Lloyd fixed point
//! can still admit a single-point move that lowers the objective, and the
//! refinement applies such moves until none is left.
//!
//! The assignment and move scans run in parallel, but every reduction and
//! every move walks points in index order with `f64` accumulators, so results
//! depend only on the inputs and the seed, never on the number of worker
//! threads.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum KMeansError {
    #[error("number of clusters must be at least 1")]
    ZeroClusters,
    #[error("{k} clusters requested but only {points} points")]
    TooManyClusters { k: usize, points: usize },
    #[error("point {0} has a different dimension")]
    RaggedPoints(usize),
    #[error("point {0} is not finite")]
    NonFinite(usize),
    #[error("max_iter must be positive and tol must be a positive number")]
    BadParams,
}

/// Parameters of one k-means run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub n_clusters: usize,
    pub seed: u64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Stop once the relative objective improvement falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

impl KMeansConfig {
    pub fn new(n_clusters: usize, seed: u64) -> Self {
        Self {
            n_clusters,
            seed,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub objective: f64,
    pub iterations_run: usize,
    /// Objective after every Lloyd iteration and refinement round;
    /// non-increasing.
    pub objective_trace: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid and the squared distance to it.
/// Ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum of squared distances of each point to the centroid it is assigned to.
pub fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansResult, KMeansError> {
    let k = config.n_clusters;
    if k == 0 {
        return Err(KMeansError::ZeroClusters);
    }
    if k > points.len() {
        return Err(KMeansError::TooManyClusters {
            k,
            points: points.len(),
        });
    }
    if config.max_iter == 0 || config.tol.is_nan() || config.tol <= 0.0 {
        return Err(KMeansError::BadParams);
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(KMeansError::RaggedPoints(i));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(KMeansError::NonFinite(i));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut iterations_run = 0;

    while iterations_run < config.max_iter {
        iterations_run += 1;
        let nearest_pairs: Vec<(usize, f64)> =
            points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let mut next: Vec<usize> = nearest_pairs.iter().map(|&(j, _)| j).collect();
        let distances: Vec<f64> = nearest_pairs.iter().map(|&(_, d)| d).collect();
        repair_empty_clusters(&mut next, &distances, k);

        let unchanged = next == assignments;
        assignments = next;
        centroids = cluster_means(points, &assignments, k, dim);
        let obj = objective(points, &centroids, &assignments);
        let previous = trace.last().copied();
        trace.push(obj);

        if unchanged {
            break;
        }
        if let Some(prev) = previous {
            if prev - obj <= config.tol * prev {
                break;
            }
        }
    }

    for _ in 0..config.max_iter {
        if !hartigan_round(points, &mut assignments, &mut centroids, k) {
            break;
        }
        centroids = cluster_means(points, &assignments, k, dim);
        trace.push(objective(points, &centroids, &assignments));
        iterations_run += 1;
    }

    Ok(KMeansResult {
        objective: *trace.last().expect("at least one iteration"),
        centroids,
        assignments,
        iterations_run,
        objective_trace: trace,
    })
}

/// k-means++: first center uniform, each further one drawn with probability
/// proportional to the squared distance to the closest chosen center. When all
/// remaining points coincide with chosen centers, an unchosen index is drawn
/// uniformly so the centers stay distinct as indices.
fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut closest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();

    while centroids.len() < k {
        let next = match WeightedIndex::new(&closest) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen[next] = true;
        let c = points[next].clone();
        for (d, p) in closest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken only from clusters that keep at least one member.
fn repair_empty_clusters(assignments: &mut [usize], distances: &[f64], k: usize) {
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut taken = vec![false; assignments.len()];
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut donor: Option<(usize, f64)> = None;
        for (i, &d) in distances.iter().enumerate() {
            if taken[i] || sizes[assignments[i]] < 2 {
                continue;
            }
            if donor.is_none_or(|(_, best)| d > best) {
                donor = Some((i, d));
            }
        }
        let (i, _) = donor.expect("k <= n leaves a donor for every empty cluster");
        sizes[assignments[i]] -= 1;
        assignments[i] = empty;
        sizes[empty] = 1;
        taken[i] = true;
    }
}

/// Moves whose gain is below this fraction of the point's removal cost are
/// treated as rounding noise.
const MOVE_TOL: f64 = 1e-12;

/// Best single-point move for point `i`: the target cluster and the decrease
/// in objective, `n_a/(n_a-1) |x-c_a|^2 - n_b/(n_b+1) |x-c_b|^2`.
fn best_move(
    point: &[f64],
    from: usize,
    centroids: &[Vec<f64>],
    sizes: &[usize],
) -> Option<(usize, f64)> {
    let n_from = sizes[from];
    if n_from < 2 {
        return None;
    }
    let removal = n_from as f64 / (n_from - 1) as f64 * squared_distance(point, &centroids[from]);
    let mut best: Option<(usize, f64)> = None;
    for (j, c) in centroids.iter().enumerate() {
        if j == from {
            continue;
        }
        let gain = removal - sizes[j] as f64 / (sizes[j] + 1) as f64 * squared_distance(point, c);
        if gain > MOVE_TOL * removal && best.is_none_or(|(_, g)| gain > g) {
            best = Some((j, gain));
        }
    }
    best
}

/// One round of Hartigan moves. Candidates are found by a parallel scan, then
/// re-checked and applied in index order with exact incremental centroid
/// updates. Returns whether any point moved.
fn hartigan_round(
    points: &[Vec<f64>],
    assignments: &mut [usize],
    centroids: &mut [Vec<f64>],
    k: usize,
) -> bool {
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let candidates: Vec<usize> = {
        let (assignments, centroids, sizes) = (&*assignments, &*centroids, &sizes);
        (0..points.len())
            .into_par_iter()
            .filter(|&i| best_move(&points[i], assignments[i], centroids, sizes).is_some())
            .collect()
    };
    let mut moved = false;
    for i in candidates {
        let from = assignments[i];
        let Some((to, _)) = best_move(&points[i], from, centroids, &sizes) else {
            continue;
        };
        let (n_from, n_to) = (sizes[from] as f64, sizes[to] as f64);
        for (c, x) in centroids[from].iter_mut().zip(&points[i]) {
            *c = (n_from * *c - x) / (n_from - 1.0);
        }
        for (c, x) in centroids[to].iter_mut().zip(&points[i]) {
            *c = (n_to * *c + x) / (n_to + 1.0);
        }
        sizes[from] -= 1;
        sizes[to] += 1;
        assignments[i] = to;
        moved = true;
    }
    moved
}

fn cluster_means(
    points: &[Vec<f64>],
    assignments: &[usize],
    k: usize,
    dim: usize,
) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        let count = count as f64;
        for s in sum.iter_mut() {
            *s /= count;
        }
    }
    sums
}
