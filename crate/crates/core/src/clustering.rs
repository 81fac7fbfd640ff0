//! Seeded Lloyd's k-means with independent restarts.
//!
//! Determinism: for a fixed point list and config the result is bit-identical
//! across runs and thread counts. The assignment step is sharded over points
//! with rayon, but each point's nearest center is computed independently and
//! collected in input order; center updates and inertia sums run sequentially
//! in point order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecmath::squared_euclidean;

/// Center initialization scheme. `Random` draws q distinct points uniformly;
/// `KMeansPlusPlus` uses distance-squared weighted seeding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    #[default]
    Random,
    KMeansPlusPlus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    /// Number of clusters.
    pub q: usize,
    /// Iteration cap per restart.
    pub max_iter: usize,
    /// Independent restarts; the restart with minimum final inertia wins.
    pub retries: usize,
    /// Master seed; each restart derives its own stream from it.
    pub seed: u64,
    /// Relative inertia improvement below which a restart stops early.
    /// 0 disables the tolerance stop and runs until `max_iter` or an exact
    /// assignment fixed point.
    pub tol: f64,
    pub init: InitMethod,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { q: 250, max_iter: 1000, retries: 10, seed: 0, tol: 0.0, init: InitMethod::Random }
    }
}

impl KMeansConfig {
    /// Discovery schedule used for the smaller benchmark suite.
    pub fn voc(q: usize, seed: u64) -> Self {
        KMeansConfig { q, max_iter: 1000, retries: 10, seed, ..Self::default() }
    }

    /// Discovery schedule used for the large-vocabulary benchmark suite.
    pub fn lvis(q: usize, seed: u64) -> Self {
        KMeansConfig { q, max_iter: 250, retries: 5, seed, ..Self::default() }
    }

    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.q == 0 {
            return Err(Error::invalid_config("cluster count must be positive"));
        }
        if self.q > n_points {
            return Err(Error::invalid_config(format!(
                "cluster count {} exceeds number of points {n_points}",
                self.q
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid_config("max_iter must be positive"));
        }
        if self.retries == 0 {
            return Err(Error::invalid_config("retries must be positive"));
        }
        if !self.tol.is_finite() || self.tol < 0.0 {
            return Err(Error::invalid_config("tol must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// q centers in cluster-index order.
    pub centers: Vec<Vec<f64>>,
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    /// Final inertia (sum of squared distances to assigned centers) of the
    /// chosen restart.
    pub inertia: f64,
    /// Iterations the chosen restart ran.
    pub iterations_run: usize,
    /// Index of the winning restart (lowest index on ties).
    pub restart_chosen: usize,
    /// Final inertia of every restart, in restart order.
    pub restart_inertias: Vec<f64>,
    /// Per-iteration inertia of the chosen restart; non-increasing.
    pub inertia_trace: Vec<f64>,
}

struct RestartOutcome {
    centers: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    trace: Vec<f64>,
}

pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::empty_input("k-means point list"));
    }
    config.validate(points.len())?;
    let dim = points[0].len();
    if dim == 0 {
        return Err(Error::empty_input("k-means points have dimension 0"));
    }
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::dim_mismatch(format!("k-means point {i}"), dim, p.len()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("k-means point {i}")));
        }
    }

    // Pre-draw one sub-seed per restart so restart r is reproducible on its own.
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let restart_seeds: Vec<u64> = (0..config.retries).map(|_| master.next_u64()).collect();

    let mut best: Option<(usize, RestartOutcome)> = None;
    let mut restart_inertias = Vec::with_capacity(config.retries);
    for (r, &seed) in restart_seeds.iter().enumerate() {
        let outcome = run_restart(points, config, seed);
        let final_inertia = *outcome.trace.last().expect("at least one iteration runs");
        restart_inertias.push(final_inertia);
        let better = match &best {
            None => true,
            Some((_, current)) => final_inertia < *current.trace.last().unwrap(),
        };
        if better {
            best = Some((r, outcome));
        }
    }
    let (restart_chosen, outcome) = best.expect("retries >= 1");
    Ok(KMeansResult {
        inertia: *outcome.trace.last().unwrap(),
        iterations_run: outcome.trace.len(),
        centers: outcome.centers,
        assignments: outcome.assignments,
        restart_chosen,
        restart_inertias,
        inertia_trace: outcome.trace,
    })
}

fn run_restart(points: &[Vec<f64>], config: &KMeansConfig, seed: u64) -> RestartOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = match config.init {
        InitMethod::Random => init_random(points, config.q, &mut rng),
        InitMethod::KMeansPlusPlus => init_kmeanspp(points, config.q, &mut rng),
    };

    let mut trace = Vec::new();
    let mut prev_assignments: Option<Vec<usize>> = None;
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..config.max_iter {
        let mut assignments = assign_points(points, &centers);
        repair_empty_clusters(points, &mut centers, &mut assignments);
        update_centers(points, &assignments, &mut centers);
        let inertia: f64 =
            points.iter().zip(&assignments).map(|(p, &a)| squared_euclidean(p, &centers[a])).sum();
        trace.push(inertia);

        if prev_assignments.as_ref() == Some(&assignments) {
            break; // exact fixed point: nothing can change in later iterations
        }
        let improvement = prev_inertia - inertia;
        if config.tol > 0.0 && prev_inertia.is_finite() && improvement < config.tol * prev_inertia {
            prev_assignments = Some(assignments);
            break;
        }
        prev_inertia = inertia;
        prev_assignments = Some(assignments);
    }
    RestartOutcome { centers, assignments: prev_assignments.expect("max_iter >= 1"), trace }
}

fn init_random(points: &[Vec<f64>], q: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let picks = rand::seq::index::sample(rng, points.len(), q);
    picks.iter().map(|i| points[i].clone()).collect()
}

fn init_kmeanspp(points: &[Vec<f64>], q: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let first = rng.random_range(0..points.len());
    let mut centers = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_euclidean(p, &centers[0])).collect();
    while centers.len() < q {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All mass collapsed (duplicate points); fall back to uniform.
            rng.random_range(0..points.len())
        };
        centers.push(points[next].clone());
        let last = centers.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            let d = squared_euclidean(p, last);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centers
}

/// Nearest center per point; ties go to the lowest center index.
fn assign_points(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    points
        .par_iter()
        .map(|p| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = squared_euclidean(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Re-seeds every empty cluster with one member of the currently largest
/// cluster: the member farthest from the empty cluster's stale center (lowest
/// point index on ties). Processed in ascending empty-cluster order with
/// counts updated as points move, so no cluster is left empty afterwards.
fn repair_empty_clusters(points: &[Vec<f64>], centers: &mut [Vec<f64>], assignments: &mut [usize]) {
    let q = centers.len();
    let mut counts = vec![0usize; q];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for empty in 0..q {
        if counts[empty] > 0 {
            continue;
        }
        let donor = counts
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.cmp(b).then(j.cmp(i)))
            .map(|(i, _)| i)
            .expect("q >= 1");
        debug_assert!(counts[donor] >= 2, "some cluster must hold at least two points");
        let mut farthest = None;
        let mut farthest_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if assignments[i] == donor {
                let d = squared_euclidean(p, &centers[empty]);
                if d > farthest_d {
                    farthest_d = d;
                    farthest = Some(i);
                }
            }
        }
        let moved = farthest.expect("donor cluster is non-empty");
        assignments[moved] = empty;
        centers[empty] = points[moved].clone();
        counts[donor] -= 1;
        counts[empty] += 1;
    }
}

fn update_centers(points: &[Vec<f64>], assignments: &[usize], centers: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let mut counts = vec![0usize; centers.len()];
    for center in centers.iter_mut() {
        center.iter_mut().for_each(|v| *v = 0.0);
    }
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for d in 0..dim {
            centers[a][d] += p[d];
        }
    }
    for (center, &count) in centers.iter_mut().zip(&counts) {
        debug_assert!(count > 0, "update_centers runs after empty-cluster repair");
        for v in center.iter_mut() {
            *v /= count as f64;
        }
    }
}

/// Deterministic blob sampler used by tests and benchmarks: `n_per_blob`
/// Gaussian points around each center.
pub fn sample_blobs(centers: &[Vec<f64>], n_per_blob: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut points = Vec::with_capacity(centers.len() * n_per_blob);
    let mut labels = Vec::with_capacity(centers.len() * n_per_blob);
    for (b, center) in centers.iter().enumerate() {
        for _ in 0..n_per_blob {
            let point: Vec<f64> = center.iter().map(|&c| c + normal.sample(&mut rng)).collect();
            points.push(point);
            labels.push(b);
        }
    }
    (points, labels)
}
