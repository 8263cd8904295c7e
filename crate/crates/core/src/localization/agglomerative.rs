use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{canonicalize_labels, LabelMap};

/// Largest point count accepted; the distance matrix is dense `n²` f64.
pub const AGGLOMERATIVE_MAX_POINTS: usize = 4096;

/// Average-linkage agglomerative clustering of the pixels of a square `H×H×C`
/// feature map under cosine distance `1 - cos(a, b)`.
///
/// Merging stops once the smallest inter-cluster distance exceeds `threshold`.
/// Zero-norm feature vectors are rejected.
pub fn agglomerative(features: &Tensor, threshold: f64) -> Result<LabelMap> {
    let (h, w, c) = features.hwc()?;
    if h != w {
        return Err(Error::shape(format!("label maps are square, got {h}×{w}")));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "distance threshold {threshold} outside (0, 1)"
        )));
    }
    let n = h * w;
    if n > AGGLOMERATIVE_MAX_POINTS {
        return Err(Error::InvalidArgument(format!(
            "{n} points exceed the agglomerative limit of {AGGLOMERATIVE_MAX_POINTS}"
        )));
    }

    let mut unit = Vec::with_capacity(n * c);
    for (i, v) in features.data().chunks_exact(c).enumerate() {
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::CosineUndefined(i));
        }
        unit.extend(v.iter().map(|&x| x as f64 / norm));
    }
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        let a = &unit[i * c..(i + 1) * c];
        for j in i + 1..n {
            let b = &unit[j * c..(j + 1) * c];
            let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let d = (1.0 - cos).max(0.0);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let merges = nn_chain(&mut dist, n);
    let mut uf = UnionFind::new(n);
    for &(a, b, height) in &merges {
        if height <= threshold {
            uf.union(a, b);
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    let (labels, k) = canonicalize_labels(&roots);
    LabelMap::new(h, labels, k)
}

/// Full average-linkage dendrogram by the nearest-neighbour chain algorithm.
/// Returns `(slot_a, slot_b, height)` for each merge; the merged cluster keeps
/// slot `min(a, b)`.
fn nn_chain(dist: &mut [f64], n: usize) -> Vec<(usize, usize, f64)> {
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut remaining = n;
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).unwrap());
        }
        let a = *chain.last().unwrap();
        let prev = chain.len().checked_sub(2).map(|i| chain[i]);
        // Nearest active neighbour; prefer the chain predecessor on ties, then the
        // lowest index.
        let mut best = prev.map(|p| (p, dist[a * n + p]));
        for x in 0..n {
            if x == a || !active[x] {
                continue;
            }
            let d = dist[a * n + x];
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((x, d)),
            }
        }
        let (b, d) = best.expect("at least two active clusters");
        if Some(b) == prev {
            chain.pop();
            chain.pop();
            let (keep, drop) = (a.min(b), a.max(b));
            let (na, nb) = (size[keep] as f64, size[drop] as f64);
            for x in 0..n {
                if !active[x] || x == keep || x == drop {
                    continue;
                }
                let nd = (na * dist[keep * n + x] + nb * dist[drop * n + x]) / (na + nb);
                dist[keep * n + x] = nd;
                dist[x * n + keep] = nd;
            }
            size[keep] += size[drop];
            active[drop] = false;
            remaining -= 1;
            merges.push((keep, drop, d));
        } else {
            chain.push(b);
        }
    }
    merges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}
