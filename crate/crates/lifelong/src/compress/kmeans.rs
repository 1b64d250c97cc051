//! k-means with k-means++ seeding, fixed iteration count, and deterministic
//! empty-cluster repair.
//!
//! Points are stored flat (`rows * dim`). Distance sums accumulate in f64 so
//! error totals are stable across summation sizes; assignment ties break to
//! the lowest centroid index.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct KmeansResult {
    /// `k * dim`, row-major.
    pub centroids: Vec<f32>,
    /// Per-point index of the nearest centroid after the final iteration.
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its centroid.
    pub total_sq_error: f64,
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(x - y)).powi(2)).sum()
}

/// k-means++ seeding: first centroid uniform, then each next centroid drawn
/// with probability proportional to squared distance from the chosen set.
/// Returns `k * dim` centroid values.
pub fn plus_plus_init(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let rows = points.len() / dim;
    debug_assert!(rows >= 1 && k >= 1);
    let point = |r: usize| &points[r * dim..(r + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..rows);
    centroids.extend_from_slice(point(first));

    let mut best_d2: Vec<f64> = (0..rows).map(|r| squared_distance(point(r), point(first))).collect();
    while centroids.len() < k * dim {
        let total: f64 = best_d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = rows - 1;
            for (r, &d) in best_d2.iter().enumerate() {
                if target < d {
                    pick = r;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All points already coincide with a centroid; any choice gives a
            // duplicate, so take a uniform one for determinism.
            rng.gen_range(0..rows)
        };
        centroids.extend_from_slice(point(chosen));
        let base = centroids.len() / dim - 1;
        for r in 0..rows {
            let d = squared_distance(point(r), &centroids[base * dim..(base + 1) * dim]);
            if d < best_d2[r] {
                best_d2[r] = d;
            }
        }
    }
    centroids
}

fn assign(points: &[f32], dim: usize, centroids: &[f32], k: usize, out: &mut [usize]) -> f64 {
    let rows = points.len() / dim;
    let mut total = 0.0f64;
    for r in 0..rows {
        let p = &points[r * dim..(r + 1) * dim];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = squared_distance(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out[r] = best;
        total += best_d;
    }
    total
}

/// Lloyd iterations from a k-means++ seed. Runs exactly `iters` update
/// rounds; empty clusters are repaired by moving in the point of the largest
/// cluster that sits farthest from its centroid.
pub fn run(points: &[f32], dim: usize, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> KmeansResult {
    let rows = points.len() / dim;
    let mut centroids = plus_plus_init(points, dim, k, rng);
    let mut assignments = vec![0usize; rows];

    for _ in 0..iters {
        assign(points, dim, &centroids, k, &mut assignments);

        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * dim];
        for (r, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for d in 0..dim {
                sums[a * dim + d] += f64::from(points[r * dim + d]);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for d in 0..dim {
                centroids[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
            }
        }

        // Empty-cluster repair: split the largest cluster at its farthest
        // member.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let largest = (0..k).max_by_key(|&j| counts[j]).unwrap();
            if counts[largest] == 0 {
                continue; // no points at all within this column
            }
            let mut far_r = None;
            let mut far_d = -1.0f64;
            for (r, &a) in assignments.iter().enumerate() {
                if a != largest {
                    continue;
                }
                let d = squared_distance(
                    &points[r * dim..(r + 1) * dim],
                    &centroids[largest * dim..(largest + 1) * dim],
                );
                if d > far_d {
                    far_d = d;
                    far_r = Some(r);
                }
            }
            if let Some(r) = far_r {
                let (src, dst) = (r * dim, c * dim);
                for d in 0..dim {
                    centroids[dst + d] = points[src + d];
                }
                assignments[r] = c;
                counts[c] = 1;
                counts[largest] -= 1;
            }
        }
    }

    let total_sq_error = assign(points, dim, &centroids, k, &mut assignments);
    KmeansResult { centroids, assignments, total_sq_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn k_distinct_points_repeated_are_a_fixed_point() {
        // 4 distinct sub-vectors, each repeated 25 times.
        let templates = [[0.0f32, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]];
        let mut points = Vec::new();
        for rep in 0..25 {
            for t in &templates {
                let _ = rep;
                points.extend_from_slice(t);
            }
        }
        let mut rng = stream(5, "kmeans");
        let result = run(&points, 2, 4, 25, &mut rng);
        assert!(result.total_sq_error < 1e-12, "error {}", result.total_sq_error);
        let mut found: Vec<Vec<f32>> =
            result.centroids.chunks(2).map(|c| c.to_vec()).collect();
        found.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f32>> = templates.iter().map(|t| t.to_vec()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(found, want);
    }

    #[test]
    fn k_equals_one_gives_columnwise_mean() {
        let mut rng = stream(6, "kmeans");
        let points: Vec<f32> = (0..300).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let dim = 3;
        let rows = points.len() / dim;
        let result = run(&points, dim, 1, 25, &mut rng);
        for d in 0..dim {
            let mean: f64 =
                (0..rows).map(|r| f64::from(points[r * dim + d])).sum::<f64>() / rows as f64;
            assert!((f64::from(result.centroids[d]) - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = stream(7, "kmeans");
        let points: Vec<f32> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = run(&points, 4, 8, 25, &mut stream(42, "fit"));
        let b = run(&points, 4, 8, 25, &mut stream(42, "fit"));
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.total_sq_error, b.total_sq_error);
    }

    #[test]
    fn empty_cluster_repair_fills_all_k() {
        // Ten tight points and one far outlier with k = 3 forces empties in
        // early rounds.
        let mut points = vec![0.0f32; 20];
        points.extend_from_slice(&[100.0, 100.0]);
        let result = run(&points, 2, 3, 25, &mut stream(1, "repair"));
        let mut seen = [false; 3];
        for &a in &result.assignments {
            seen[a] = true;
        }
        // All points identical except one: at least two clusters must be
        // non-empty and no NaN centroids may appear.
        assert!(result.centroids.iter().all(|v| v.is_finite()));
        assert!(seen.iter().filter(|&&s| s).count() >= 2);
    }
}
