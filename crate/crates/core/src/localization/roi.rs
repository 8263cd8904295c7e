use crate::error::{Error, Result};
use crate::tensor::nearest_resize_grid;

use super::{LabelMap, LATENT_RES, SEG_RES};

/// Binary region-of-interest mask on the 64×64 latent grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoIMask {
    cells: Vec<bool>,
}

impl RoIMask {
    pub fn new(cells: Vec<bool>) -> Result<Self> {
        if cells.len() != LATENT_RES * LATENT_RES {
            return Err(Error::shape(format!(
                "RoI mask needs {} cells, got {}",
                LATENT_RES * LATENT_RES,
                cells.len()
            )));
        }
        Ok(Self { cells })
    }

    pub fn empty() -> Self {
        Self {
            cells: vec![false; LATENT_RES * LATENT_RES],
        }
    }

    pub fn full() -> Self {
        Self {
            cells: vec![true; LATENT_RES * LATENT_RES],
        }
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(LATENT_RES * LATENT_RES);
        for r in 0..LATENT_RES {
            for c in 0..LATENT_RES {
                cells.push(f(r, c));
            }
        }
        Self { cells }
    }

    /// Max-pool a square binary grid whose side is a multiple of 64 down to 64×64.
    pub fn from_grid(side: usize, grid: &[bool]) -> Result<Self> {
        if side == 0 || !side.is_multiple_of(LATENT_RES) || grid.len() != side * side {
            return Err(Error::shape(format!(
                "mask grid must be square with a side that is a multiple of {LATENT_RES}, got {} cells for side {side}",
                grid.len()
            )));
        }
        let f = side / LATENT_RES;
        Ok(Self::from_fn(|r, c| {
            (0..f).any(|dy| (0..f).any(|dx| grid[(r * f + dy) * side + c * f + dx]))
        }))
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * LATENT_RES + col]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// `self ⊇ other`.
    pub fn contains_mask(&self, other: &RoIMask) -> bool {
        self.cells.iter().zip(&other.cells).all(|(&a, &b)| a || !b)
    }

    /// 0/1 floats, row-major.
    pub fn to_f32(&self) -> Vec<f32> {
        self.cells
            .iter()
            .map(|&c| if c { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Downsample the 64×64 mask by max pooling: a coarse cell is set iff any
/// covered latent cell is set.
pub fn mask_at_resolution(m: &RoIMask, res: usize) -> Result<Vec<bool>> {
    if res == 0 || !LATENT_RES.is_multiple_of(res) {
        return Err(Error::InvalidArgument(format!(
            "mask resolution {res} does not divide {LATENT_RES}"
        )));
    }
    let f = LATENT_RES / res;
    let mut out = Vec::with_capacity(res * res);
    for r in 0..res {
        for c in 0..res {
            out.push((0..f).any(|dy| (0..f).any(|dx| m.get(r * f + dy, c * f + dx))));
        }
    }
    Ok(out)
}

/// Union of every segment that contains at least one point. The 256×256 label
/// map is first brought to 64×64 with nearest sampling; points are 64×64
/// `(row, col)` coordinates.
pub fn extract_roi(seg: &LabelMap, points: &[(usize, usize)]) -> Result<RoIMask> {
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    if seg.side != SEG_RES {
        return Err(Error::shape(format!(
            "label map must be {SEG_RES}×{SEG_RES}, got side {}",
            seg.side
        )));
    }
    let small = nearest_resize_grid(&seg.labels, SEG_RES, SEG_RES, LATENT_RES, LATENT_RES)?;
    let mut hit = vec![false; seg.k.max(1)];
    for &(r, c) in points {
        if r >= LATENT_RES || c >= LATENT_RES {
            return Err(Error::InvalidArgument(format!(
                "point ({r}, {c}) outside {LATENT_RES}×{LATENT_RES}"
            )));
        }
        let label = small[r * LATENT_RES + c] as usize;
        if label >= hit.len() {
            hit.resize(label + 1, false);
        }
        hit[label] = true;
    }
    RoIMask::new(small.iter().map(|&l| hit[l as usize]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_map(f: impl Fn(usize, usize) -> u32, k: usize) -> LabelMap {
        let mut labels = Vec::with_capacity(SEG_RES * SEG_RES);
        for r in 0..SEG_RES {
            for c in 0..SEG_RES {
                labels.push(f(r, c));
            }
        }
        LabelMap::new(SEG_RES, labels, k).unwrap()
    }

    #[test]
    fn mask_resolution_examples() {
        let full = RoIMask::full();
        assert!(mask_at_resolution(&full, 16).unwrap().iter().all(|&b| b));

        let corner = RoIMask::from_fn(|r, c| r == 0 && c == 0);
        for res in [64, 32, 16] {
            let m = mask_at_resolution(&corner, res).unwrap();
            assert!(m[0]);
            assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        }

        let checker = RoIMask::from_fn(|r, c| (r + c) % 2 == 0);
        // Block-max enumeration: every 2×2 block of a checkerboard holds two set cells.
        let mut expect = Vec::new();
        for r in 0..32 {
            for c in 0..32 {
                let mut any = false;
                for dy in 0..2 {
                    for dx in 0..2 {
                        any |= (2 * r + dy + 2 * c + dx) % 2 == 0;
                    }
                }
                expect.push(any);
            }
        }
        assert!(expect.iter().all(|&b| b));
        assert_eq!(mask_at_resolution(&checker, 32).unwrap(), expect);
        assert!(mask_at_resolution(&checker, 24).is_err());
    }

    #[test]
    fn roi_single_segment() {
        let seg = label_map(|r, _| if r < 128 { 0 } else { 1 }, 2);
        let roi = extract_roi(&seg, &[(3, 5), (10, 60)]).unwrap();
        assert_eq!(roi, RoIMask::from_fn(|r, _| r < 32));
    }

    #[test]
    fn roi_all_segments() {
        let seg = label_map(|r, c| ((r / 64) * 4 + c / 64) as u32, 16);
        let mut pts = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                pts.push((r * 16 + 3, c * 16 + 3));
            }
        }
        assert_eq!(extract_roi(&seg, &pts).unwrap(), RoIMask::full());
    }

    #[test]
    fn roi_two_segments_membership_oracle() {
        let seg = label_map(|r, c| u32::from(r + c >= 256), 2);
        let pts = [(0, 0), (63, 63)];
        let roi = extract_roi(&seg, &pts).unwrap();
        // Per-pixel membership: a latent cell is in the RoI iff its sampled label
        // is the label under some point.
        let label_at = |r: usize, c: usize| seg.labels[(4 * r + 2) * SEG_RES + 4 * c + 2];
        let wanted: Vec<u32> = pts.iter().map(|&(r, c)| label_at(r, c)).collect();
        for r in 0..64 {
            for c in 0..64 {
                assert_eq!(roi.get(r, c), wanted.contains(&label_at(r, c)));
            }
        }
        assert_eq!(roi, RoIMask::full());
    }

    #[test]
    fn roi_errors() {
        let seg = label_map(|_, _| 0, 1);
        assert!(matches!(extract_roi(&seg, &[]), Err(Error::EmptyPoints)));
        assert!(extract_roi(&seg, &[(64, 0)]).is_err());
    }

    #[test]
    fn from_grid_max_pools() {
        let mut grid = vec![false; 256 * 256];
        grid[255 * 256 + 255] = true;
        let m = RoIMask::from_grid(256, &grid).unwrap();
        assert!(m.get(63, 63));
        assert_eq!(m.count(), 1);
        assert!(RoIMask::from_grid(100, &vec![false; 100 * 100]).is_err());
    }
}
