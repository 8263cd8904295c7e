use crate::edit::regularize::{regularize_row, reward_row};
use crate::error::{Error, Result};
use crate::localization::RoIMask;
use crate::tensor::{axpy, dot, softmax_in_place, Tensor};

/// Edits one row of pre-softmax scores in place. `row` is the query index.
pub trait ScoreHook {
    fn apply(&self, row: usize, scores: &mut [f32]);
}

/// Leaves scores untouched.
pub struct NoHook;

impl ScoreHook for NoHook {
    #[inline]
    fn apply(&self, _row: usize, _scores: &mut [f32]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectiveMode {
    None,
    /// `-LARGE` on unrelated tokens inside the RoI.
    RegularizeUnrelated,
    /// `+LARGE` on related tokens inside the RoI.
    RewardRelated,
}

/// Score edit forwarded to the cross-attention layers of the text-conditioned branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnDirective {
    pub mode: DirectiveMode,
    pub mask64: RoIMask,
    pub tokens: Vec<usize>,
}

impl AttnDirective {
    pub fn none() -> Self {
        Self {
            mode: DirectiveMode::None,
            mask64: RoIMask::empty(),
            tokens: Vec::new(),
        }
    }

    pub fn regularize(mask64: RoIMask, unrelated: Vec<usize>) -> Self {
        Self {
            mode: DirectiveMode::RegularizeUnrelated,
            mask64,
            tokens: unrelated,
        }
    }

    pub fn reward(mask64: RoIMask, related: Vec<usize>) -> Self {
        Self {
            mode: DirectiveMode::RewardRelated,
            mask64,
            tokens: related,
        }
    }

    pub fn is_active(&self) -> bool {
        self.mode != DirectiveMode::None
    }

    /// Check the token set against a context of `d` tokens.
    pub fn validate(&self, d: usize) -> Result<()> {
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= d) {
            return Err(Error::InvalidArgument(format!(
                "token {t} outside {d} tokens"
            )));
        }
        match self.mode {
            DirectiveMode::None => Ok(()),
            DirectiveMode::RegularizeUnrelated => {
                if crate::edit::regularize::covers_all(&self.tokens, d) {
                    Err(Error::AllTokensRegularized)
                } else {
                    Ok(())
                }
            }
            DirectiveMode::RewardRelated => {
                if self.tokens.is_empty() {
                    Err(Error::NoRelatedTokens)
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// A directive bound to one attention resolution.
pub(crate) struct DirectiveHook<'a> {
    pub mode: DirectiveMode,
    pub mask: &'a [bool],
    pub tokens: &'a [usize],
}

impl ScoreHook for DirectiveHook<'_> {
    #[inline]
    fn apply(&self, row: usize, scores: &mut [f32]) {
        if !self.mask[row] {
            return;
        }
        match self.mode {
            DirectiveMode::None => {}
            DirectiveMode::RegularizeUnrelated => regularize_row(scores, self.tokens),
            DirectiveMode::RewardRelated => reward_row(scores, self.tokens),
        }
    }
}

/// `softmax(Q Kᵀ / √d) · V`, returning the output and the probabilities `P`.
///
/// `hook` sees each row of scaled scores before the softmax.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    hook: &dyn ScoreHook,
) -> Result<(Tensor, Tensor)> {
    let (out, p) = attention_impl(q, k, v, hook, true)?;
    Ok((out, p.expect("probabilities requested")))
}

/// Same as [`attention`] without materialising `P`.
pub fn attention_output(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    hook: &dyn ScoreHook,
) -> Result<Tensor> {
    attention_impl(q, k, v, hook, false).map(|(o, _)| o)
}

fn attention_impl(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    hook: &dyn ScoreHook,
    keep_probs: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let ([n, d], [m, dk], [mv, dv]) = (q.dims(), k.dims(), v.dims()) else {
        return Err(Error::shape(format!(
            "attention needs rank-2 Q, K, V; got {:?}, {:?}, {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    };
    let (n, d, m, dv) = (*n, *d, *m, *dv);
    if *dk != d || *mv != m {
        return Err(Error::shape(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    // Kᵀ, so each score row is a sequence of contiguous axpy updates.
    let mut kt = vec![0.0f32; d * m];
    for (j, row) in k.data().chunks_exact(d).enumerate() {
        for (c, &val) in row.iter().enumerate() {
            kt[c * m + j] = val;
        }
    }
    // Vᵀ, so each output entry is one long dot product over the keys.
    let mut vt = vec![0.0f32; dv * m];
    for (j, row) in v.data().chunks_exact(dv).enumerate() {
        for (c, &val) in row.iter().enumerate() {
            vt[c * m + j] = val;
        }
    }
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; n * dv];
    let mut probs = if keep_probs {
        Vec::with_capacity(n * m)
    } else {
        Vec::new()
    };
    let mut scores = vec![0.0f32; m];
    for (i, qrow) in q.data().chunks_exact(d).enumerate() {
        scores.fill(0.0);
        for (c, &qv) in qrow.iter().enumerate() {
            axpy(&mut scores, qv, &kt[c * m..(c + 1) * m]);
        }
        scores.iter_mut().for_each(|s| *s *= scale);
        hook.apply(i, &mut scores);
        softmax_in_place(&mut scores);
        for (c, o) in out[i * dv..(i + 1) * dv].iter_mut().enumerate() {
            *o = dot(&scores, &vt[c * m..(c + 1) * m]);
        }
        if keep_probs {
            probs.extend_from_slice(&scores);
        }
    }
    let out = Tensor::new(&[n, dv], out)?;
    let probs = keep_probs
        .then(|| Tensor::new(&[n, m], probs))
        .transpose()?;
    Ok((out, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;
    use crate::tensor::{matmul, softmax_lastdim};

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut p = Prng::new(seed);
        Tensor::from_fn(dims, |_| p.next_gaussian() as f32).unwrap()
    }

    #[test]
    fn zero_query_is_uniform() {
        let q = Tensor::zeros(&[3, 4]).unwrap();
        let k = random(&[5, 4], 1);
        let v = random(&[5, 4], 2);
        let (out, p) = attention(&q, &k, &v, &NoHook).unwrap();
        assert!(p.data().iter().all(|&x| (x - 0.2).abs() < 1e-7));
        for c in 0..4 {
            let mean: f32 = (0..5).map(|j| v.data()[j * 4 + c]).sum::<f32>() / 5.0;
            for i in 0..3 {
                assert!((out.data()[i * 4 + c] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_key_hand_case() {
        let q = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let k = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let v = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let (out, p) = attention(&q, &k, &v, &NoHook).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        let p2 = e2 / (e1 + e2);
        assert!((p.data()[0] as f64 - (1.0 - p2)).abs() < 1e-7);
        assert!((p.data()[1] as f64 - p2).abs() < 1e-7);
        assert!((out.data()[0] as f64 - p2).abs() < 1e-7);
    }

    #[test]
    fn matches_dense_formula() {
        let q = random(&[6, 8], 3);
        let k = random(&[9, 8], 4);
        let v = random(&[9, 5], 5);
        let (out, p) = attention(&q, &k, &v, &NoHook).unwrap();
        let kt = Tensor::from_fn(&[8, 9], |i| k.data()[(i % 9) * 8 + i / 9]).unwrap();
        let scores = matmul(&q, &kt).unwrap().scale(1.0 / 8f32.sqrt());
        let p_ref = softmax_lastdim(&scores);
        let out_ref = matmul(&p_ref, &v).unwrap();
        for (a, b) in p.data().iter().zip(p_ref.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in out.data().iter().zip(out_ref.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(attention_output(&q, &k, &v, &NoHook).unwrap(), out);
    }

    #[test]
    fn none_directive_is_bitwise_unhooked() {
        let q = random(&[16, 4], 6);
        let k = random(&[7, 4], 7);
        let v = random(&[7, 4], 8);
        let mask = vec![true; 16];
        let hook = DirectiveHook {
            mode: DirectiveMode::None,
            mask: &mask,
            tokens: &[0, 1],
        };
        assert_eq!(
            attention(&q, &k, &v, &hook).unwrap(),
            attention(&q, &k, &v, &NoHook).unwrap()
        );
    }

    #[test]
    fn shape_errors() {
        let q = random(&[2, 3], 1);
        let k = random(&[4, 2], 1);
        assert!(attention(&q, &k, &k, &NoHook).is_err());
        let k = random(&[4, 3], 1);
        let v = random(&[5, 3], 1);
        assert!(attention(&q, &k, &v, &NoHook).is_err());
    }

    #[test]
    fn directive_validation() {
        let d = AttnDirective::regularize(RoIMask::full(), (0..77).collect());
        assert!(matches!(d.validate(77), Err(Error::AllTokensRegularized)));
        let d = AttnDirective::reward(RoIMask::full(), vec![]);
        assert!(matches!(d.validate(77), Err(Error::NoRelatedTokens)));
        assert!(AttnDirective::regularize(RoIMask::full(), vec![80])
            .validate(77)
            .is_err());
        assert!(AttnDirective::none().validate(77).is_ok());
    }
}
