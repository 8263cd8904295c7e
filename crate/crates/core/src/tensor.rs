//! Dense row-major `f32` tensors and the handful of numerics the pipeline needs.
//!
//! Every routine here runs its reductions in a fixed order, so identical inputs give
//! bitwise-identical outputs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(format!(
                "rank must be 1..=4, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::EmptyTensor);
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn full(dims: &[usize], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n])
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, (0..n).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("rank >= 1")
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(format!("expected H×W×C, got {:?}", self.dims))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn expect_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }
}

/// Bilinear resize of an `H×W×C` tensor using half-pixel centres:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::EmptyTensor);
    }
    if out_h == h && out_w == w {
        return Ok(t.clone());
    }
    let ys = axis_samples(h, out_h);
    let xs = axis_samples(w, out_w);
    let src = t.data();
    let mut out = vec![0.0f32; out_h * out_w * c];
    let mut top = vec![0.0f32; c];
    let mut bottom = vec![0.0f32; c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = &src[(y0 * w + x0) * c..][..c];
            let p01 = &src[(y0 * w + x1) * c..][..c];
            let p10 = &src[(y1 * w + x0) * c..][..c];
            let p11 = &src[(y1 * w + x1) * c..][..c];
            for ch in 0..c {
                top[ch] = lerp(p00[ch], p01[ch], fx);
                bottom[ch] = lerp(p10[ch], p11[ch], fx);
            }
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            for ch in 0..c {
                dst[ch] = lerp(top[ch], bottom[ch], fy);
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

// `a + f * (b - a)` keeps constant fields exact and ignores `b` when `f == 0`.
#[inline]
fn lerp(a: f32, b: f32, f: f32) -> f32 {
    if f == 0.0 {
        a
    } else {
        a + f * (b - a)
    }
}

fn axis_samples(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Nearest-neighbour resample of a row-major `h×w` grid with pixel-centre mapping
/// `src = floor((dst + 0.5) * in / out)`. Values are copied, never blended.
pub fn nearest_resize_grid<T: Copy>(
    grid: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<T>> {
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 || grid.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if grid.len() != h * w {
        return Err(Error::shape(format!("grid of {} for {h}×{w}", grid.len())));
    }
    let map =
        |d: usize, n_in: usize, n_out: usize| (((2 * d + 1) * n_in) / (2 * n_out)).min(n_in - 1);
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = map(oy, h, out_h);
        for ox in 0..out_w {
            out.push(grid[sy * w + map(ox, w, out_w)]);
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize of an `H×W` tensor.
pub fn nearest_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w] = t.dims()[..] else {
        return Err(Error::shape(format!("expected H×W, got {:?}", t.dims())));
    };
    let out = nearest_resize_grid(t.data(), h, w, out_h, out_w)?;
    Tensor::new(&[out_h, out_w], out)
}

/// In-place numerically stable softmax of one slice. Exponentials are `f32`, the
/// normaliser is accumulated and applied in `f64`.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

pub fn softmax_lastdim(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let d = t.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        softmax_in_place(row);
    }
    out
}

/// Dense `M×K · K×N` product. Each output row is built as a sequence of
/// axpy updates in ascending `k`, so the summation order is fixed.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([m, k], [k2, n]) = (a.dims(), b.dims()) else {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    };
    let (m, k, n) = (*m, *k, *n);
    if k != *k2 {
        return Err(Error::shape(format!(
            "matmul inner dims {:?} · {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(0.0);
        let ar = &a[i * k..(i + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            axpy(row, av, &b[kk * n..(kk + 1) * n]);
        }
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with 32 interleaved partial sums folded pairwise in a fixed order.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 32;
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(0.0, |t, (x, y)| t + x * y);
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

/// Per-channel standardisation of an `H×W×C` tensor over its spatial grid
/// (mean 0, population std 1). Channels with std below `1e-8` become zero.
pub fn standardize_channels(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    let n = h * w;
    if n < 2 {
        return Err(Error::shape("standardization needs at least two pixels"));
    }
    let mut mean = vec![0.0f64; c];
    for px in t.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; c];
    for px in t.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<Option<f64>> = var
        .iter()
        .map(|s| {
            let std = (s / n as f64).sqrt();
            (std >= 1e-8).then(|| 1.0 / std)
        })
        .collect();
    let mut out = t.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((v, &m), inv) in px.iter_mut().zip(&mean).zip(&inv_std) {
            *v = match inv {
                Some(inv) => ((*v as f64 - m) * inv) as f32,
                None => 0.0,
            };
        }
    }
    Ok(out)
}

/// 2×2 average pooling of an `H×W×C` tensor (H, W even).
pub fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    avg_pool(t, 2)
}

/// `f×f` average pooling of an `H×W×C` tensor; `H` and `W` must be multiples of `f`.
pub fn avg_pool(t: &Tensor, f: usize) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!("{h}×{w} not divisible by pool {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let src = t.data();
    let mut out = vec![0.0f32; oh * ow * c];
    let inv = 1.0 / (f * f) as f32;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..][..c];
            for dy in 0..f {
                for dx in 0..f {
                    let p = &src[((oy * f + dy) * w + ox * f + dx) * c..][..c];
                    for (d, &v) in dst.iter_mut().zip(p) {
                        *d += v;
                    }
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Concatenate `H×W×C_i` tensors along channels.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyTensor)?;
    let (h, w, _) = first.hwc()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (ph, pw, pc) = p.hwc()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(format!("concat spatial {ph}×{pw} vs {h}×{w}")));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for px in 0..h * w {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(&[h, w, total], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;
    use proptest::prelude::*;

    fn random(dims: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
        let mut p = Prng::new(seed);
        Tensor::from_fn(dims, |_| lo + (hi - lo) * p.next_uniform() as f32).unwrap()
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(matches!(
            Tensor::new(&[0, 2], vec![]),
            Err(Error::EmptyTensor)
        ));
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn bilinear_constant_field() {
        let t = Tensor::full(&[4, 4, 1], 3.0).unwrap();
        let r = bilinear_resize(&t, 8, 8).unwrap();
        assert_eq!(r.dims(), &[8, 8, 1]);
        assert!(r.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn bilinear_identity_is_bitwise() {
        let t = random(&[5, 7, 3], 1, -2.0, 2.0);
        let r = bilinear_resize(&t, 5, 7).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn bilinear_matches_1d_oracle() {
        // Hand-written half-pixel-centre interpolation on a 1-D signal.
        fn oracle(signal: &[f64], out_n: usize) -> Vec<f64> {
            let n = signal.len() as f64;
            (0..out_n)
                .map(|i| {
                    let x = ((i as f64 + 0.5) * n / out_n as f64 - 0.5)
                        .max(0.0)
                        .min(n - 1.0);
                    let lo = x.floor();
                    let hi = (lo + 1.0).min(n - 1.0);
                    let t = x - lo;
                    signal[lo as usize] * (1.0 - t) + signal[hi as usize] * t
                })
                .collect()
        }
        let t = Tensor::new(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
        let r = bilinear_resize(&t, 4, 1).unwrap();
        let expect = oracle(&[0.0, 1.0], 4);
        assert_eq!(expect, vec![0.0, 0.25, 0.75, 1.0]);
        for (a, b) in r.data().iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn bilinear_rejects_empty_output() {
        let t = Tensor::zeros(&[2, 2, 1]).unwrap();
        assert!(matches!(bilinear_resize(&t, 0, 2), Err(Error::EmptyTensor)));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        for v in softmax_lastdim(&t).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let t = Tensor::new(&[2], vec![-1e9, 0.0]).unwrap();
        let s = softmax_lastdim(&t);
        assert_eq!(s.data(), &[0.0, 1.0]);

        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax_lastdim(&t);
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        for (v, ev) in s.data().iter().zip(&e) {
            assert!((*v as f64 - ev / z).abs() < 1e-7);
        }
    }

    #[test]
    fn matmul_examples() {
        let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(&[2, 2], vec![3.0, -1.0, 0.5, 7.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);

        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);

        let r = Tensor::full(&[1, 4], 1.0).unwrap();
        let c = Tensor::full(&[4, 1], 1.0).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[4.0]);

        assert!(matmul(&a, &r).is_err());
    }

    #[test]
    fn standardize_examples() {
        let t = Tensor::full(&[2, 2, 1], 5.0).unwrap();
        assert!(standardize_channels(&t)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let t = Tensor::new(&[1, 2, 1], vec![0.0, 2.0]).unwrap();
        assert_eq!(standardize_channels(&t).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn nearest_examples() {
        let t = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = nearest_resize(&t, 4, 4).unwrap();
        #[rustfmt::skip]
        let expect = [
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
            2.0, 2.0, 3.0, 3.0,
            2.0, 2.0, 3.0, 3.0,
        ];
        assert_eq!(r.data(), &expect);
        assert_eq!(nearest_resize(&t, 2, 2).unwrap(), t);

        // 4×4 checkerboard with distinct values so the sampled cell is identifiable.
        let board = Tensor::from_fn(&[4, 4], |i| i as f32).unwrap();
        let r = nearest_resize(&board, 2, 2).unwrap();
        // Output cell (oy, ox) has centre (oy + 0.5) * 2 in source units, i.e. row/col 1 or 3.
        let mut expect = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                let sy = ((oy as f64 + 0.5) * 2.0).floor() as usize;
                let sx = ((ox as f64 + 0.5) * 2.0).floor() as usize;
                expect.push((sy * 4 + sx) as f32);
            }
        }
        assert_eq!(expect, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(r.data(), &expect[..]);
        assert!(nearest_resize_grid::<u8>(&[], 0, 0, 2, 2).is_err());
    }

    #[test]
    fn avg_pool_and_concat() {
        let t = Tensor::from_fn(&[2, 2, 1], |i| i as f32).unwrap();
        assert_eq!(avg_pool2(&t).unwrap().data(), &[1.5]);
        let a = Tensor::full(&[2, 2, 2], 1.0).unwrap();
        let b = Tensor::full(&[2, 2, 3], 2.0).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[2, 2, 5]);
        assert_eq!(&c.data()[..5], &[1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn dot_matches_naive() {
        for len in [0usize, 1, 31, 32, 33, 100] {
            let a: Vec<f32> = (0..len).map(|i| (i as f32 * 0.37).sin()).collect();
            let b: Vec<f32> = (0..len).map(|i| (i as f32 * 0.11).cos()).collect();
            let naive: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
            assert!((dot(&a, &b) as f64 - naive).abs() < 1e-4, "len {len}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>()) {
            let t = random(&[16, 77], seed, -50.0, 50.0);
            let s = softmax_lastdim(&t);
            for row in s.data().chunks_exact(77) {
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn bilinear_roundtrip_of_constant(v in -100.0f32..100.0, h in 1usize..9, w in 1usize..9, oh in 1usize..17, ow in 1usize..17) {
            let t = Tensor::full(&[h, w, 2], v).unwrap();
            let up = bilinear_resize(&t, oh, ow).unwrap();
            let back = bilinear_resize(&up, h, w).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let a = random(&[3, 3], seed, -1.0, 1.0);
            let b = random(&[3, 3], seed ^ 1, -1.0, 1.0);
            let c = random(&[3, 3], seed ^ 2, -1.0, 1.0);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().map(|v| v.abs()).fold(1e-3f32, f32::max);
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() / scale <= 1e-4);
            }
        }

        #[test]
        fn standardize_is_idempotent(seed in any::<u64>()) {
            let t = random(&[6, 5, 3], seed, -10.0, 10.0);
            let once = standardize_channels(&t).unwrap();
            let twice = standardize_channels(&once).unwrap();
            for (x, y) in once.data().iter().zip(twice.data()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn ops_are_pure(seed in any::<u64>()) {
            let t = random(&[4, 6, 2], seed, -3.0, 3.0);
            prop_assert_eq!(bilinear_resize(&t, 7, 3).unwrap(), bilinear_resize(&t, 7, 3).unwrap());
            prop_assert_eq!(standardize_channels(&t).unwrap(), standardize_channels(&t).unwrap());
            prop_assert_eq!(softmax_lastdim(&t), softmax_lastdim(&t));
        }
    }
}
