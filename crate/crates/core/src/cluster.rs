//! Lloyd's k-means with k-means++ seeding, and topic neighborhoods built from
//! a seed term's nearest neighbors.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::embedding::{nearest_neighbors, norm, EmbeddingError, EmbeddingModel};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k must satisfy 1 <= k <= N (k={k}, N={n})")]
    InvalidK { k: usize, n: usize },
    #[error("points must be non-empty, finite and of equal dimension")]
    InvalidPoints,
    #[error("assignment {index} of point {point} is out of range for {k} centroids")]
    AssignmentOutOfRange { point: usize, index: usize, k: usize },
    #[error("{assignments} assignments for {points} points")]
    LengthMismatch { assignments: usize, points: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: 100,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index of each point.
    pub assignments: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after seeding, after each Lloyd iteration, and for the final
    /// recentred solution. Non-increasing.
    pub trace: Vec<f64>,
    /// Which restart produced this result.
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn validate(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map(Vec::len).ok_or(ClusterError::InvalidPoints)?;
    if d == 0
        || points
            .iter()
            .any(|p| p.len() != d || p.iter().any(|x| !x.is_finite()))
    {
        return Err(ClusterError::InvalidPoints);
    }
    Ok(d)
}

/// `J = Σ_n ‖x_n − m_{k(n)}‖²` for the clustering's own centroids.
pub fn kmeans_objective(points: &[Vec<f64>], clustering: &Clustering) -> Result<f64> {
    objective(points, &clustering.centroids, &clustering.assignments)
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    if assignments.len() != points.len() {
        return Err(ClusterError::LengthMismatch {
            assignments: assignments.len(),
            points: points.len(),
        });
    }
    points
        .iter()
        .zip(assignments)
        .enumerate()
        .map(|(n, (x, &k))| {
            centroids
                .get(k)
                .map(|m| sq_dist(x, m))
                .ok_or(ClusterError::AssignmentOutOfRange {
                    point: n,
                    index: k,
                    k: centroids.len(),
                })
        })
        .sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, m) in centroids.iter().enumerate() {
        let d = sq_dist(x, m);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every point already coincides with a centroid.
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[next].clone());
        let c = centroids.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, centroids)).collect();
    repair_empty(points, centroids, &mut assignments);
    assignments
}

/// Moves each empty cluster's centroid onto the point farthest from its
/// current centroid (taken from a cluster with more than one member).
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&n| sizes[assignments[n]] > 1)
            .map(|n| (n, sq_dist(&points[n], &centroids[assignments[n]])))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        let Some((n, _)) = far else { return };
        centroids[empty] = points[n].clone();
        assignments[n] = empty;
    }
}

fn means(points: &[Vec<f64>], assignments: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut sums = vec![vec![0.0; d]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, c), prev)| {
            if c == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|x| x / c as f64).collect()
            }
        })
        .collect()
}

fn lloyd(points: &[Vec<f64>], k: usize, params: &KMeansParams, restart: usize) -> Clustering {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(restart as u64);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignments = assign(points, &mut centroids);
    let mut j = objective(points, &centroids, &assignments).expect("valid assignment");
    let mut trace = vec![j];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        iterations += 1;
        centroids = means(points, &assignments, &centroids);
        let next = assign(points, &mut centroids);
        let j_next = objective(points, &centroids, &next).expect("valid assignment");
        trace.push(j_next);
        let unchanged = next == assignments;
        let small_step = (j - j_next).abs() < params.tol;
        assignments = next;
        j = j_next;
        if unchanged || small_step {
            converged = true;
            break;
        }
    }
    centroids = means(points, &assignments, &centroids);
    let objective = objective(points, &centroids, &assignments).expect("valid assignment");
    if objective < j {
        trace.push(objective);
    }
    Clustering {
        centroids,
        assignments,
        objective,
        iterations,
        converged,
        trace,
        restart,
    }
}

/// Best-of-`restarts` Lloyd clustering. Deterministic for a fixed seed; ties
/// on the objective go to the earliest restart.
pub fn kmeans(points: &[Vec<f64>], k: usize, params: &KMeansParams) -> Result<Clustering> {
    validate(points)?;
    if k < 1 || k > points.len() {
        return Err(ClusterError::InvalidK { k, n: points.len() });
    }
    let runs: Vec<Clustering> = (0..params.restarts.max(1))
        .into_par_iter()
        .map(|r| lloyd(points, k, params, r))
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, cur| if cur.objective < best.objective { cur } else { best })
        .expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicCluster {
    pub seed_term: String,
    /// Nearest neighbors of the seed by cosine, best first.
    pub neighborhood: Vec<(String, f64)>,
    /// Tokens in clustering order: the seed, then the neighborhood.
    pub members: Vec<String>,
    /// Unit-length member vectors that were clustered.
    #[serde(skip)]
    pub points: Vec<Vec<f64>>,
    pub clustering: Clustering,
    /// Center of the cluster containing the seed term.
    pub centroid_of_topic: Vec<f64>,
}

/// Clusters the seed term together with its `neighborhood_size` nearest
/// neighbors (capped at `V - 1`) after scaling every vector to unit length.
pub fn topic_cluster(
    model: &EmbeddingModel,
    seed_term: &str,
    neighborhood_size: usize,
    k: usize,
    params: &KMeansParams,
) -> Result<TopicCluster> {
    let neighborhood = nearest_neighbors(model, seed_term, neighborhood_size)?;
    let members: Vec<String> = std::iter::once(seed_term.to_string())
        .chain(neighborhood.iter().map(|(t, _)| t.clone()))
        .collect();
    let points = members
        .iter()
        .map(|t| {
            let v = model.vector(t).expect("member is in vocabulary");
            let n = norm(v);
            if n == 0.0 {
                return Err(ClusterError::Embedding(EmbeddingError::ZeroNorm));
            }
            Ok(v.iter().map(|x| x / n).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let clustering = kmeans(&points, k.min(points.len()), params)?;
    let centroid_of_topic = clustering.centroids[clustering.assignments[0]].clone();
    Ok(TopicCluster {
        seed_term: seed_term.to_string(),
        neighborhood,
        members,
        points,
        clustering,
        centroid_of_topic,
    })
}
