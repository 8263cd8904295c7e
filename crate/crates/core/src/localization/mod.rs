//! Edit localization: multi-resolution feature fusion, clustering into segments,
//! instruction attention aggregation, top-N point selection and RoI extraction.

mod agglomerative;
mod kmeans;
mod roi;

pub use agglomerative::{agglomerative, AGGLOMERATIVE_MAX_POINTS};
pub use kmeans::{kmeans, kmeans_detailed, kmeans_points, KMeansOutcome, PointClusters};
pub use roi::{extract_roi, mask_at_resolution, RoIMask};

use std::collections::BTreeMap;

use crate::denoiser::{BlockId, HookRecord};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize, standardize_channels, Tensor};

/// Side of the latent / attention grid.
pub const LATENT_RES: usize = 64;
/// Side of the fused feature grid used for segmentation.
pub const SEG_RES: usize = 256;

/// Per-pixel cluster assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub side: usize,
    /// Row-major `side × side`, every id `< k`.
    pub labels: Vec<u32>,
    pub k: usize,
    /// `empty[id]` is set when cluster `id` owns no pixel.
    pub empty: Vec<bool>,
}

impl LabelMap {
    pub fn new(side: usize, labels: Vec<u32>, k: usize) -> Result<Self> {
        if labels.len() != side * side || side == 0 {
            return Err(Error::shape(format!(
                "label map of {} for side {side}",
                labels.len()
            )));
        }
        let mut empty = vec![true; k];
        for &l in &labels {
            let slot = empty.get_mut(l as usize).ok_or_else(|| {
                Error::InvalidArgument(format!("label {l} out of range for k = {k}"))
            })?;
            *slot = false;
        }
        Ok(Self {
            side,
            labels,
            k,
            empty,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.side + col]
    }

    /// Number of clusters that own at least one pixel.
    pub fn occupied(&self) -> usize {
        self.empty.iter().filter(|e| !**e).count()
    }
}

/// Renumber labels by first appearance in row-major order. Returns the new labels
/// and the number of distinct ids.
pub(crate) fn canonicalize_labels(raw: &[usize]) -> (Vec<u32>, usize) {
    let mut map: Vec<Option<u32>> = Vec::new();
    let mut next = 0u32;
    let labels = raw
        .iter()
        .map(|&l| {
            if l >= map.len() {
                map.resize(l + 1, None);
            }
            *map[l].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    (labels, next as usize)
}

/// Fuse captured block features into one `target×target×C_total` tensor.
///
/// Each `(block, step)` map is bilinearly resized to `target` and standardized per
/// channel; the step maps of a block are averaged; blocks are concatenated along
/// channels in ladder order.
pub fn fuse_features(hooks: &HookRecord, target: usize) -> Result<Tensor> {
    if hooks.features.is_empty() {
        return Err(Error::NoFeatures);
    }
    // Map order is (step, block); regroup by block, steps ascending.
    let mut by_block: BTreeMap<BlockId, Vec<&Tensor>> = BTreeMap::new();
    for ((_, block), t) in &hooks.features {
        by_block.entry(*block).or_default().push(t);
    }
    let mut blocks: Vec<(usize, Vec<f32>)> = Vec::with_capacity(by_block.len());
    for (block, maps) in by_block {
        let (_, _, c) = maps[0].hwc()?;
        let mut sum = vec![0.0f32; target * target * c];
        for t in &maps {
            if t.hwc()?.2 != c {
                return Err(Error::shape(format!(
                    "block {} changes channel count",
                    block.name()
                )));
            }
            let std = standardize_channels(&bilinear_resize(t, target, target)?)?;
            for (s, v) in sum.iter_mut().zip(std.data()) {
                *s += v;
            }
        }
        if maps.len() > 1 {
            let inv = 1.0 / maps.len() as f32;
            sum.iter_mut().for_each(|v| *v *= inv);
        }
        blocks.push((c, sum));
    }

    let total: usize = blocks.iter().map(|(c, _)| c).sum();
    let pixels = target * target;
    let mut out = Vec::with_capacity(pixels * total);
    for px in 0..pixels {
        for (c, data) in &blocks {
            out.extend_from_slice(&data[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(&[target, target, total], out)
}

/// Non-negative 64×64 attention saliency.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != LATENT_RES * LATENT_RES {
            return Err(Error::shape(format!(
                "saliency needs {} values, got {}",
                LATENT_RES * LATENT_RES,
                values.len()
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; LATENT_RES * LATENT_RES],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * LATENT_RES + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[LATENT_RES, LATENT_RES], self.values.clone()).expect("saliency dims")
    }
}

const L1_EPS: f64 = 1e-12;

/// Mean attention of the related tokens per latent cell.
///
/// Every captured map is resized to 64×64, all maps are averaged, each cell's
/// token vector is L1-normalized and the related token columns are averaged.
pub fn aggregate_attention(hooks: &HookRecord, related: &[usize]) -> Result<SaliencyMap> {
    if related.is_empty() {
        return Err(Error::NoRelatedTokens);
    }
    let first = hooks.attn.values().next().ok_or(Error::NoAttention)?;
    let (_, _, d) = first.hwc()?;
    if let Some(&bad) = related.iter().find(|&&t| t >= d) {
        return Err(Error::InvalidArgument(format!(
            "token index {bad} outside {d} tokens"
        )));
    }
    let cells = LATENT_RES * LATENT_RES;
    let mut sum = vec![0.0f64; cells * d];
    for map in hooks.attn.values() {
        let (_, _, md) = map.hwc()?;
        if md != d {
            return Err(Error::shape(format!("token axis {md} vs {d}")));
        }
        let r = bilinear_resize(map, LATENT_RES, LATENT_RES)?;
        for (s, &v) in sum.iter_mut().zip(r.data()) {
            *s += v as f64;
        }
    }
    let count = hooks.attn.len() as f64;
    let values = sum
        .chunks_exact(d)
        .map(|tokens| {
            let mean: Vec<f64> = tokens.iter().map(|v| v / count).collect();
            let norm = mean.iter().sum::<f64>().max(L1_EPS);
            let picked: f64 = related.iter().map(|&t| mean[t] / norm).sum();
            (picked / related.len() as f64) as f32
        })
        .collect();
    SaliencyMap::new(values)
}

/// The `n` highest cells, ordered by value descending then row-major index.
pub fn top_n_points(s: &SaliencyMap, n: usize) -> Result<Vec<(usize, usize)>> {
    let cells = LATENT_RES * LATENT_RES;
    if n == 0 || n > cells {
        return Err(Error::InvalidArgument(format!(
            "point count {n} outside 1..={cells}"
        )));
    }
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| s.values[b].total_cmp(&s.values[a]).then_with(|| a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(n)
        .map(|i| (i / LATENT_RES, i % LATENT_RES))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;

    fn noise(dims: &[usize], seed: u64) -> Tensor {
        let mut p = Prng::new(seed);
        Tensor::from_fn(dims, |_| p.next_gaussian() as f32).unwrap()
    }

    #[test]
    fn canonical_labels() {
        let (l, n) = canonicalize_labels(&[5, 5, 2, 7, 2]);
        assert_eq!(l, [0, 0, 1, 2, 1]);
        assert_eq!(n, 3);
    }

    #[test]
    fn fuse_constant_is_zero() {
        let mut h = HookRecord::default();
        h.features
            .insert((3, BlockId::Mid), Tensor::full(&[16, 16, 4], 2.5).unwrap());
        let f = fuse_features(&h, 32).unwrap();
        assert_eq!(f.dims(), &[32, 32, 4]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_channel_arithmetic() {
        let mut h = HookRecord::default();
        h.features.insert((1, BlockId::Down1), noise(&[8, 8, 2], 1));
        h.features.insert((1, BlockId::Up2), noise(&[16, 16, 3], 2));
        let f = fuse_features(&h, 16).unwrap();
        assert_eq!(f.dims(), &[16, 16, 5]);
    }

    #[test]
    fn fuse_averages_steps() {
        let a = noise(&[8, 8, 3], 10);
        let b = noise(&[8, 8, 3], 11);
        let mut h = HookRecord::default();
        h.features.insert((4, BlockId::Up1), a.clone());
        h.features.insert((5, BlockId::Up1), b.clone());
        let f = fuse_features(&h, 16).unwrap();
        let sa = standardize_channels(&bilinear_resize(&a, 16, 16).unwrap()).unwrap();
        let sb = standardize_channels(&bilinear_resize(&b, 16, 16).unwrap()).unwrap();
        for ((x, y), z) in sa.data().iter().zip(sb.data()).zip(f.data()) {
            assert!(((x + y) / 2.0 - z).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_requires_features() {
        assert!(matches!(
            fuse_features(&HookRecord::default(), 256),
            Err(Error::NoFeatures)
        ));
    }

    #[test]
    fn saliency_single_spike() {
        let mut map = Tensor::zeros(&[64, 64, 3]).unwrap();
        // All mass on token 0 everywhere except one cell where token 1 takes it.
        for px in map.data_mut().chunks_exact_mut(3) {
            px[0] = 1.0;
        }
        map.data_mut()[(5 * 64 + 7) * 3] = 0.0;
        map.data_mut()[(5 * 64 + 7) * 3 + 1] = 1.0;
        let mut h = HookRecord::default();
        h.attn.insert((1, BlockId::Up2), map.clone());
        let s = aggregate_attention(&h, &[1]).unwrap();
        assert_eq!(s.get(5, 7), 1.0);
        assert_eq!(s.values.iter().filter(|&&v| v != 0.0).count(), 1);

        h.attn.insert((2, BlockId::Up2), map);
        assert_eq!(aggregate_attention(&h, &[1]).unwrap(), s);
    }

    #[test]
    fn saliency_hand_normalization() {
        // 2×2×3 map; upsampled to 64×64 with half-pixel centres the four corner
        // cells of the output reproduce the input cells exactly.
        #[rustfmt::skip]
        let vals = vec![
            0.2, 0.3, 0.5,   0.1, 0.1, 0.8,
            0.6, 0.2, 0.2,   0.0, 0.5, 0.5,
        ];
        let mut h = HookRecord::default();
        h.attn.insert(
            (1, BlockId::Mid),
            Tensor::new(&[2, 2, 3], vals.clone()).unwrap(),
        );
        let s = aggregate_attention(&h, &[2]).unwrap();
        let hand = |i: usize| {
            let t = &vals[i * 3..i * 3 + 3];
            (t[2] / (t[0] + t[1] + t[2])) as f32
        };
        assert!((s.get(0, 0) - hand(0)).abs() < 1e-6);
        assert!((s.get(0, 63) - hand(1)).abs() < 1e-6);
        assert!((s.get(63, 0) - hand(2)).abs() < 1e-6);
        assert!((s.get(63, 63) - hand(3)).abs() < 1e-6);
    }

    #[test]
    fn saliency_errors() {
        let mut h = HookRecord::default();
        assert!(matches!(
            aggregate_attention(&h, &[]),
            Err(Error::NoRelatedTokens)
        ));
        assert!(matches!(
            aggregate_attention(&h, &[1]),
            Err(Error::NoAttention)
        ));
        h.attn.insert(
            (1, BlockId::Mid),
            Tensor::full(&[2, 2, 3], 1.0 / 3.0).unwrap(),
        );
        assert!(aggregate_attention(&h, &[3]).is_err());
    }

    #[test]
    fn saliency_duplicate_invariance_and_range() {
        let mut h = HookRecord::default();
        let mut p = Prng::new(3);
        for step in 1..=3 {
            for block in [BlockId::Mid, BlockId::Up1] {
                let r = block.resolution();
                let t = Tensor::from_fn(&[r, r, 5], |_| p.next_uniform() as f32).unwrap();
                h.attn
                    .insert((step, block), crate::tensor::softmax_lastdim(&t));
            }
        }
        let s1 = aggregate_attention(&h, &[1, 3]).unwrap();
        let mut dup = h.clone();
        for ((step, block), t) in &h.attn {
            dup.attn.insert((step + 100, *block), t.clone());
        }
        let s2 = aggregate_attention(&dup, &[1, 3]).unwrap();
        for (a, b) in s1.values.iter().zip(&s2.values) {
            assert!((a - b).abs() < 1e-6);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn top_n_examples() {
        let s = SaliencyMap::new(vec![0.5; 4096]).unwrap();
        assert_eq!(top_n_points(&s, 3).unwrap(), [(0, 0), (0, 1), (0, 2)]);

        let mut v = vec![0.0; 4096];
        v[17 * 64 + 40] = 9.0;
        let s = SaliencyMap::new(v).unwrap();
        assert_eq!(top_n_points(&s, 1).unwrap(), [(17, 40)]);
        assert!(top_n_points(&s, 0).is_err());
        assert!(top_n_points(&s, 4097).is_err());
    }

    #[test]
    fn top_n_full_sort_oracle() {
        // Values only in the top-left 4×4, with ties.
        #[rustfmt::skip]
        let block = [
            0.3, 0.9, 0.1, 0.3,
            0.0, 0.9, 0.5, 0.2,
            0.7, 0.3, 0.8, 0.1,
            0.4, 0.6, 0.2, 0.9,
        ];
        let mut v = vec![-1.0f32; 4096];
        for r in 0..4 {
            for c in 0..4 {
                v[r * 64 + c] = block[r * 4 + c];
            }
        }
        let s = SaliencyMap::new(v.clone()).unwrap();
        // Full sort oracle: enumerate every cell as (-value, index) and sort.
        let mut all: Vec<(f32, usize)> = v.iter().enumerate().map(|(i, &x)| (-x, i)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<(usize, usize)> = all[..8].iter().map(|&(_, i)| (i / 64, i % 64)).collect();
        assert_eq!(
            expect,
            [
                (0, 1),
                (1, 1),
                (3, 3),
                (2, 2),
                (2, 0),
                (3, 1),
                (1, 2),
                (3, 0)
            ]
        );
        assert_eq!(top_n_points(&s, 8).unwrap(), expect);
    }
}
