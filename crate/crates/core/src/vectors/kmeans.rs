use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingMatrix, Result, VectorError};
use crate::par::{self, Exec};

/// Result of a Lloyd's k-means fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub d: usize,
    /// `k x d` row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, first entry from the seeded centroids.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Nearest centroid for `x` (ties to the lowest index) and its squared distance.
    pub fn nearest(&self, x: &[f32]) -> (usize, f64) {
        nearest(&self.centroids, self.k, x)
    }
}

fn sq_dist(x: &[f32], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(&a, &b)| (a as f64 - b) * (a as f64 - b)).sum()
}

fn nearest(centroids: &[f64], k: usize, x: &[f32]) -> (usize, f64) {
    let d = x.len();
    let mut best = (0, f64::INFINITY);
    for c in 0..k {
        let dist = sq_dist(x, &centroids[c * d..(c + 1) * d]);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

pub fn kmeans_fit(m: &EmbeddingMatrix, k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    kmeans_fit_with(m, k, seed, max_iter, Exec::default())
}

/// Lloyd iterations from k-means++ seeding until the assignment is a fixpoint or
/// `max_iter` updates have run. The assignment step may run in parallel; centroid
/// sums are always accumulated in row order so results do not depend on `exec`.
pub fn kmeans_fit_with(
    m: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    exec: Exec,
) -> Result<ClusterModel> {
    let n = m.n();
    let d = m.d();
    if k == 0 {
        return Err(VectorError::Shape("k must be positive".into()));
    }
    if k > n {
        return Err(VectorError::KTooLarge { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(m, k, &mut rng, exec);

    let assign_all = |centroids: &[f64]| -> (Vec<usize>, Vec<f64>) {
        par::map_range(exec, n, |i| nearest(centroids, k, m.row(i))).into_iter().unzip()
    };

    let (mut assignments, mut dists) = assign_all(&centroids);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        update_centroids(m, k, &assignments, &dists, &mut centroids);
        let (next, next_dists) = assign_all(&centroids);
        trace.push(next_dists.iter().sum());
        let converged = next == assignments;
        assignments = next;
        dists = next_dists;
        if converged {
            break;
        }
    }
    Ok(ClusterModel {
        k,
        d,
        centroids,
        inertia: *trace.last().expect("trace is never empty"),
        assignments,
        inertia_trace: trace,
        iterations,
    })
}

fn plus_plus_init(m: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng, exec: Exec) -> Vec<f64> {
    let n = m.n();
    let d = m.d();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let first: Vec<f64> = m.row(chosen[0]).iter().map(|&v| v as f64).collect();
    let mut best: Vec<f64> = par::map_range(exec, n, |i| sq_dist(m.row(i), &first));
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in best.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can run off the end; take the last positive weight
            pick.unwrap_or_else(|| best.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            // all remaining points coincide with a centre
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        let c: Vec<f64> = m.row(pick).iter().map(|&v| v as f64).collect();
        let upd = par::map_range(exec, n, |i| sq_dist(m.row(i), &c));
        for (b, u) in best.iter_mut().zip(upd) {
            *b = b.min(u);
        }
    }
    let mut centroids = Vec::with_capacity(k * d);
    for &i in &chosen {
        centroids.extend(m.row(i).iter().map(|&v| v as f64));
    }
    centroids
}

// Means of assigned rows; empty clusters are re-seeded at the point farthest from
// its current centroid, each such point used at most once.
fn update_centroids(
    m: &EmbeddingMatrix,
    k: usize,
    assignments: &[usize],
    dists: &[f64],
    centroids: &mut [f64],
) {
    let d = m.d();
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(m.row(i)) {
            *s += v as f64;
        }
    }
    let mut taken = vec![false; m.n()];
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *dst = s * inv;
            }
        } else {
            let far = (0..m.n())
                .filter(|&i| !taken[i])
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(j) if dists[j] >= dists[i] => Some(j),
                    _ => Some(i),
                });
            if let Some(i) = far {
                taken[i] = true;
                for (dst, &v) in centroids[c * d..(c + 1) * d].iter_mut().zip(m.row(i)) {
                    *dst = v as f64;
                }
            }
        }
    }
}
