//! Seeded Lloyd k-means with k-means++ initialization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Number of times an empty cluster was re-seeded.
    pub reseeded: usize,
}

/// Index of the nearest centroid by squared Euclidean distance, ties to the lower index.
pub fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = linalg::sq_dist(c, x);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<f64> {
    let dim = points[0].len();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(&points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| linalg::sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc > u && *w > 0.0 {
                    idx = i;
                    break;
                }
            }
            while d2[idx] == 0.0 {
                // rounding pushed us past the last positive weight
                idx -= 1;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let start = centroids.len();
        centroids.extend_from_slice(&points[pick]);
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(linalg::sq_dist(p, &centroids[start..start + dim]));
        }
    }
    centroids
}

/// Runs k-means++ seeding followed by exactly `iters` Lloyd iterations.
///
/// Empty clusters are re-seeded with the point farthest from its current
/// centroid.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut R) -> Result<KMeans> {
    if points.is_empty() {
        return Err(Error::InvalidInput("k-means on an empty point set".into()));
    }
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    let dim = points[0].len();
    let mut centroids = plus_plus(points, k, rng);
    let mut assignment = vec![0usize; points.len()];
    let mut reseeded = 0;
    for _ in 0..iters {
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest(&centroids, dim, p);
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (a, p) in assignment.iter().zip(points) {
            counts[*a] += 1;
            linalg::add_assign(&mut sums[a * dim..(a + 1) * dim], p);
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len()).filter(|&i| !taken[i]).max_by(|&i, &j| {
                    let di = linalg::sq_dist(&points[i], &centroids[assignment[i] * dim..(assignment[i] + 1) * dim]);
                    let dj = linalg::sq_dist(&points[j], &centroids[assignment[j] * dim..(assignment[j] + 1) * dim]);
                    di.total_cmp(&dj).then(j.cmp(&i))
                });
                if let Some(i) = far {
                    taken[i] = true;
                    centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[i]);
                    reseeded += 1;
                }
            }
        }
    }
    for (a, p) in assignment.iter_mut().zip(points) {
        *a = nearest(&centroids, dim, p);
    }
    Ok(KMeans {
        centroids,
        assignment,
        reseeded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let km = kmeans(&pts, 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(km.centroids, vec![2.0, 1.0]);
        assert_eq!(km.assignment, vec![0, 0, 0]);
    }

    #[test]
    fn duplicated_points_are_recovered() {
        let base = [vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 2.0]];
        let pts: Vec<Vec<f64>> = base.iter().flat_map(|p| [p.clone(), p.clone(), p.clone()]).collect();
        for seed in 0..20 {
            let km = kmeans(&pts, 3, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut got: Vec<Vec<f64>> = km.centroids.chunks(2).map(|c| c.to_vec()).collect();
            got.sort_by(|a, b| a[0].total_cmp(&b[0]));
            let mut want = base.to_vec();
            want.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(got, want);
        }
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // more clusters than distinct points: the surplus must be re-seeded
        let pts = vec![vec![1.0], vec![1.0], vec![1.0], vec![9.0]];
        let km = kmeans(&pts, 3, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(km.centroids.iter().all(|c| c.is_finite()));
        assert!(km.reseeded > 0);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(kmeans(&[], 2, 1, &mut rng).is_err());
        assert!(kmeans(&[vec![1.0]], 0, 1, &mut rng).is_err());
    }
}
