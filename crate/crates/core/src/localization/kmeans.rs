use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tensor::Tensor;

use super::{canonicalize_labels, LabelMap};

const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutcome {
    pub labels: LabelMap,
    /// Cost (sum of squared distances to assigned centroids) after each
    /// assignment step.
    pub trace: Vec<f64>,
    /// Cost of the final partition against its exact cluster means.
    pub cost: f64,
    pub iterations: usize,
}

/// K-means over the pixels of a square `H×H×C` feature map.
pub fn kmeans(features: &Tensor, k: usize, seed: u64) -> Result<LabelMap> {
    kmeans_detailed(features, k, seed).map(|o| o.labels)
}

/// K-means with k-means++ seeding from `Prng(seed)` and Lloyd iterations under
/// squared Euclidean distance. Stops when assignments repeat or after 100
/// iterations. Labels are renumbered by first row-major occurrence; ids that
/// end up without pixels are flagged empty.
pub fn kmeans_detailed(features: &Tensor, k: usize, seed: u64) -> Result<KMeansOutcome> {
    let (h, w, c) = features.hwc()?;
    if h != w {
        return Err(Error::shape(format!("label maps are square, got {h}×{w}")));
    }
    let p = kmeans_points(features.data(), c, k, seed)?;
    Ok(KMeansOutcome {
        labels: LabelMap::new(h, p.labels, k)?,
        trace: p.trace,
        cost: p.cost,
        iterations: p.iterations,
    })
}

/// Clustering of a flat point set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointClusters {
    /// Per-point cluster id, renumbered by first occurrence.
    pub labels: Vec<u32>,
    pub trace: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
}

/// The k-means of [`kmeans_detailed`] over `points.len() / dim` points of
/// dimension `dim`, stored contiguously.
pub fn kmeans_points(points: &[f32], dim: usize, k: usize, seed: u64) -> Result<PointClusters> {
    if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
        return Err(Error::shape(format!(
            "{} values do not form points of dimension {dim}",
            points.len()
        )));
    }
    let (n, c) = (points.len() / dim, dim);
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if k > n {
        return Err(Error::TooManyClusters { k, points: n });
    }
    let point = |i: usize| &points[i * c..(i + 1) * c];

    let mut centroids = init_plus_plus(points, n, c, k, seed);
    let mut assign = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        let mut cost = 0.0f64;
        for (i, a) in assign.iter_mut().enumerate() {
            let (best, d) = nearest(point(i), &centroids, c);
            cost += d;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        trace.push(cost);
        if !changed {
            break;
        }
        update_centroids(points, c, &assign, &mut centroids);
    }

    let cost = partition_cost(points, c, &assign, k);
    let (labels, _) = canonicalize_labels(&assign);
    Ok(PointClusters {
        labels,
        trace,
        cost,
        iterations,
    })
}

fn init_plus_plus(points: &[f32], n: usize, c: usize, k: usize, seed: u64) -> Vec<f64> {
    let mut rng = Prng::new(seed);
    let mut centroids = Vec::with_capacity(k * c);
    let first = rng.next_below(n);
    centroids.extend(points[first * c..(first + 1) * c].iter().map(|&v| v as f64));
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist64(&points[i * c..(i + 1) * c], &centroids[..c]))
        .collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_uniform() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in best.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just below `target`; fall back to the last
            // point with positive weight.
            chosen.unwrap_or_else(|| best.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.next_below(n)
        };
        let start = centroids.len();
        centroids.extend(points[pick * c..(pick + 1) * c].iter().map(|&v| v as f64));
        for (i, b) in best.iter_mut().enumerate() {
            let d = sq_dist64(&points[i * c..(i + 1) * c], &centroids[start..]);
            if d < *b {
                *b = d;
            }
        }
    }
    centroids
}

// Ties go to the lowest centroid index.
fn nearest(p: &[f32], centroids: &[f64], c: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, cent) in centroids.chunks_exact(c).enumerate() {
        let d = sq_dist64(p, cent);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn update_centroids(points: &[f32], c: usize, assign: &[usize], centroids: &mut [f64]) {
    let k = centroids.len() / c;
    let mut sums = vec![0.0f64; k * c];
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (s, &v) in sums[a * c..(a + 1) * c].iter_mut().zip(&points[i * c..]) {
            *s += v as f64;
        }
    }
    for j in 0..k {
        // Empty clusters keep their previous centroid.
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for (cent, s) in centroids[j * c..(j + 1) * c].iter_mut().zip(&sums[j * c..]) {
                *cent = s * inv;
            }
        }
    }
}

fn partition_cost(points: &[f32], c: usize, assign: &[usize], k: usize) -> f64 {
    let mut means = vec![0.0f64; k * c];
    update_centroids(points, c, assign, &mut means);
    assign
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist64(&points[i * c..(i + 1) * c], &means[a * c..(a + 1) * c]))
        .sum()
}

fn sq_dist64(a: &[f32], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            let d = a[i * 4 + l] as f64 - b[i * 4 + l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        let d = a[i] as f64 - b[i];
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points_tensor(pts: &[[f32; 2]], side: usize) -> Tensor {
        Tensor::new(&[side, side, 2], pts.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn single_cluster() {
        let t = Tensor::from_fn(&[4, 4, 3], |i| (i as f32).sin()).unwrap();
        let l = kmeans(&t, 1, 5).unwrap();
        assert!(l.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn too_many_clusters() {
        let t = Tensor::zeros(&[2, 2, 1]).unwrap();
        assert!(matches!(
            kmeans(&t, 5, 0),
            Err(Error::TooManyClusters { k: 5, points: 4 })
        ));
    }

    #[test]
    fn duplicates_share_labels() {
        // 8 distinct vectors, each appearing twice (positions i and i + 8).
        let base: Vec<[f32; 2]> = (0..8)
            .map(|i| [(i as f32 * 1.7).sin() * 5.0, (i as f32 * 0.9).cos() * 5.0])
            .collect();
        let pts: Vec<[f32; 2]> = base.iter().chain(base.iter()).copied().collect();
        let t = points_tensor(&pts, 4);
        for k in 1..=6 {
            let l = kmeans(&t, k, 11).unwrap();
            for i in 0..8 {
                assert_eq!(l.labels[i], l.labels[i + 8]);
            }
        }
    }

    #[test]
    fn labels_canonical_and_deterministic() {
        let t = Tensor::from_fn(&[8, 8, 3], |i| ((i * 7919) % 23) as f32).unwrap();
        let a = kmeans_detailed(&t, 4, 3).unwrap();
        assert_eq!(a, kmeans_detailed(&t, 4, 3).unwrap());
        assert_eq!(a.labels.labels[0], 0);
        let mut seen = 0;
        for &l in &a.labels.labels {
            assert!(l <= seen);
            if l == seen {
                seen += 1;
            }
        }
        for pair in a.trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn all_identical_points() {
        let t = Tensor::full(&[3, 3, 2], 1.0).unwrap();
        let l = kmeans(&t, 3, 0).unwrap();
        assert!(l.labels.iter().all(|&v| v == 0));
        assert_eq!(l.occupied(), 1);
        assert_eq!(l.empty, [false, true, true]);
    }
}
