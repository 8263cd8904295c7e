//! Toy bi-conditional U-Net `e(z_t, c_I, c_T)`.
//!
//! Ladder: input conv (8→16 at 64²), down blocks 64→32 (16→32 ch) and 32→16
//! (32→64 ch), mid block at 16² (64 ch), up blocks 16→32 (64→32 ch) and 32→64
//! (32→16 ch), output conv (16→4). Up blocks add the matching down-path
//! activation as an additive skip. Every block ends with single-head
//! self-attention followed by cross-attention over the text context, both
//! residual and preceded by a parameter-free layer norm.
//!
//! The forward pass records block outputs for the `(c_I, ∅)` branch and
//! cross-attention probabilities for the `(c_I, c_T)` branch, each within its
//! capture window, and applies an [`AttnDirective`] only in the cross-attention
//! layers of the text-conditioned branch.

mod attention;
mod hooks;

pub use attention::{attention, attention_output, AttnDirective, DirectiveMode, NoHook, ScoreHook};
pub use hooks::{BlockId, CaptureConfig, HookRecord, StepWindow};

use attention::DirectiveHook;

use crate::error::{Error, Result};
use crate::localization::{mask_at_resolution, LATENT_RES};
use crate::prng::Prng;
use crate::tensor::{avg_pool2, bilinear_resize, concat_channels, matmul_into, Tensor};
use crate::text::{TextEmbedding, EMBED_DIM};

pub const LATENT_CHANNELS: usize = 4;
const IN_CHANNELS: usize = 2 * LATENT_CHANNELS;
const STEM_CHANNELS: usize = 16;
const TIME_DIM: usize = 32;
const NORM_EPS: f64 = 1e-5;

/// Position of one denoising iteration: `index` runs `1..=total` in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInfo {
    pub index: usize,
    pub total: usize,
}

impl StepInfo {
    /// Noise level at the start of this step on the linear 1 → 0 schedule.
    pub fn sigma(&self) -> f32 {
        1.0 - (self.index - 1) as f32 / self.total as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttnWeights {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnWeights {
    /// `C×C`, applied to image features.
    pub q: Tensor,
    /// `E×C`, applied to text context rows.
    pub k: Tensor,
    /// `E×C`, applied to text context rows.
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    /// `9·C_in × C_out`, rows ordered `(ky, kx, c_in)`.
    pub conv: Tensor,
    /// `TIME_DIM × C_out`.
    pub time: Tensor,
    pub self_attn: SelfAttnWeights,
    pub cross_attn: CrossAttnWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    pub conv_in: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub conv_out: Tensor,
    /// `1×E` context row used when the text condition is absent.
    pub null_token: Tensor,
}

/// Draw all weights from `Prng(seed)`, each entry `N(0, 1) / √fan_in`, where
/// `fan_in` is the matrix row count. Draw order: `conv_in`; then per block in
/// ladder order `conv`, `time`, self-attention `q`, `k`, `v`, cross-attention
/// `q`, `k`, `v`; then `conv_out`; then `null_token`.
pub fn init_weights(seed: u64) -> DenoiserWeights {
    let mut rng = Prng::new(seed);
    let mut draw = |rows: usize, cols: usize| {
        let scale = 1.0 / (rows as f64).sqrt();
        Tensor::from_fn(&[rows, cols], |_| (rng.next_gaussian() * scale) as f32)
            .expect("positive weight dims")
    };
    let conv_in = draw(9 * IN_CHANNELS, STEM_CHANNELS);
    let blocks = BlockId::ALL
        .iter()
        .map(|b| {
            let (cin, c) = (b.in_channels(), b.channels());
            BlockWeights {
                conv: draw(9 * cin, c),
                time: draw(TIME_DIM, c),
                self_attn: SelfAttnWeights {
                    q: draw(c, c),
                    k: draw(c, c),
                    v: draw(c, c),
                },
                cross_attn: CrossAttnWeights {
                    q: draw(c, c),
                    k: draw(EMBED_DIM, c),
                    v: draw(EMBED_DIM, c),
                },
            }
        })
        .collect();
    let conv_out = draw(9 * STEM_CHANNELS, LATENT_CHANNELS);
    let null_token = draw(1, EMBED_DIM);
    DenoiserWeights {
        conv_in,
        blocks,
        conv_out,
        null_token,
    }
}

impl DenoiserWeights {
    /// Same shapes as [`init_weights`], every entry zero.
    pub fn zeroed() -> Self {
        let mut w = init_weights(0);
        w.for_each_mut(|t| t.data_mut().fill(0.0));
        w
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        f(&mut self.conv_in);
        for b in &mut self.blocks {
            for t in [
                &mut b.conv,
                &mut b.time,
                &mut b.self_attn.q,
                &mut b.self_attn.k,
                &mut b.self_attn.v,
                &mut b.cross_attn.q,
                &mut b.cross_attn.k,
                &mut b.cross_attn.v,
            ] {
                f(t);
            }
        }
        f(&mut self.conv_out);
        f(&mut self.null_token);
    }
}

/// Anything that predicts noise for one CFG branch.
pub trait NoisePredictor {
    /// `c_image = None` is the null image condition, `c_text = None` the null text
    /// condition. Returns the `64×64×4` prediction and whatever was recorded.
    fn predict(
        &self,
        z: &Tensor,
        step: StepInfo,
        c_image: Option<&Tensor>,
        c_text: Option<&TextEmbedding>,
        directive: &AttnDirective,
        capture: &CaptureConfig,
    ) -> Result<(Tensor, HookRecord)>;
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    weights: DenoiserWeights,
}

impl Denoiser {
    pub fn new(weights: DenoiserWeights) -> Self {
        Self { weights }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(init_weights(seed))
    }

    pub fn weights(&self) -> &DenoiserWeights {
        &self.weights
    }

    pub fn forward(
        &self,
        z: &Tensor,
        step: StepInfo,
        c_image: Option<&Tensor>,
        c_text: Option<&TextEmbedding>,
        directive: &AttnDirective,
        capture: &CaptureConfig,
    ) -> Result<(Tensor, HookRecord)> {
        let latent = [LATENT_RES, LATENT_RES, LATENT_CHANNELS];
        if z.dims() != latent {
            return Err(Error::shape(format!(
                "latent must be {latent:?}, got {:?}",
                z.dims()
            )));
        }
        if step.index == 0 || step.index > step.total {
            return Err(Error::InvalidArgument(format!(
                "step {} outside 1..={}",
                step.index, step.total
            )));
        }
        let zero_image;
        let image = match c_image {
            Some(ci) => {
                if ci.dims() != latent {
                    return Err(Error::shape(format!(
                        "image condition must be {latent:?}, got {:?}",
                        ci.dims()
                    )));
                }
                ci
            }
            None => {
                zero_image = Tensor::zeros(&latent)?;
                &zero_image
            }
        };
        let context = match c_text {
            Some(e) => {
                if e.matrix.dims().len() != 2 || e.matrix.dims()[1] != EMBED_DIM {
                    return Err(Error::shape(format!(
                        "text context must be D×{EMBED_DIM}, got {:?}",
                        e.matrix.dims()
                    )));
                }
                &e.matrix
            }
            None => &self.weights.null_token,
        };
        let regularize = c_text.is_some() && directive.is_active();
        if regularize {
            directive.validate(context.dims()[0])?;
        }
        let record_features = c_image.is_some()
            && c_text.is_none()
            && capture.features.is_some_and(|w| w.contains(step.index));
        let record_attn = c_text.is_some() && capture.attn.is_some_and(|w| w.contains(step.index));

        let temb = time_embedding(step.sigma() * 1000.0);
        let w = &self.weights;
        let mut hooks = HookRecord::default();
        let mut run_block = |block: BlockId, x: Tensor| -> Result<Tensor> {
            let bw = &w.blocks[block as usize];
            let x = self_attention_stage(x, &bw.self_attn)?;
            let mask;
            let hook: Box<dyn ScoreHook> = if regularize {
                mask = mask_at_resolution(&directive.mask64, block.resolution())?;
                Box::new(DirectiveHook {
                    mode: directive.mode,
                    mask: &mask,
                    tokens: &directive.tokens,
                })
            } else {
                Box::new(NoHook)
            };
            let (x, probs) =
                cross_attention_stage(x, context, &bw.cross_attn, &*hook, record_attn)?;
            if let Some(p) = probs {
                hooks.attn.insert((step.index, block), p);
            }
            if record_features {
                hooks.features.insert((step.index, block), x.clone());
            }
            Ok(x)
        };

        let input = concat_channels(&[z, image])?;
        let h0 = conv3x3(&input, &w.conv_in)?;

        let b = &w.blocks;
        let x = conv_time_silu(&h0, &b[0], &temb)?;
        let d1 = run_block(BlockId::Down1, avg_pool2(&x)?)?;

        let x = conv_time_silu(&d1, &b[1], &temb)?;
        let d2 = run_block(BlockId::Down2, avg_pool2(&x)?)?;

        let x = conv_time_silu(&d2, &b[2], &temb)?.add(&d2)?;
        let m = run_block(BlockId::Mid, x)?;

        let up = bilinear_resize(&m, 32, 32)?;
        let x = conv_time_silu(&up, &b[3], &temb)?.add(&d1)?;
        let u1 = run_block(BlockId::Up1, x)?;

        let up = bilinear_resize(&u1, 64, 64)?;
        let x = conv_time_silu(&up, &b[4], &temb)?.add(&h0)?;
        let u2 = run_block(BlockId::Up2, x)?;

        let out = conv3x3(&u2, &w.conv_out)?;
        Ok((out, hooks))
    }
}

impl NoisePredictor for Denoiser {
    fn predict(
        &self,
        z: &Tensor,
        step: StepInfo,
        c_image: Option<&Tensor>,
        c_text: Option<&TextEmbedding>,
        directive: &AttnDirective,
        capture: &CaptureConfig,
    ) -> Result<(Tensor, HookRecord)> {
        self.forward(z, step, c_image, c_text, directive, capture)
    }
}

fn time_embedding(t: f32) -> Vec<f32> {
    let half = TIME_DIM / 2;
    let mut out = vec![0.0f32; TIME_DIM];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

fn conv_time_silu(x: &Tensor, bw: &BlockWeights, temb: &[f32]) -> Result<Tensor> {
    let mut y = conv3x3(x, &bw.conv)?;
    let c = bw.time.dims()[1];
    let mut bias = vec![0.0f32; c];
    matmul_into(temb, bw.time.data(), &mut bias, 1, TIME_DIM, c);
    for px in y.data_mut().chunks_exact_mut(c) {
        for (v, b) in px.iter_mut().zip(&bias) {
            let s = *v + b;
            *v = s / (1.0 + (-s).exp());
        }
    }
    Ok(y)
}

/// Zero-padded 3×3 convolution of an `H×W×C_in` tensor with weights
/// `9·C_in × C_out` (rows ordered `(ky, kx, c_in)`).
fn conv3x3(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (h, w, cin) = x.hwc()?;
    let [rows, cout] = weight.dims()[..] else {
        return Err(Error::shape("conv weight must be rank 2"));
    };
    if rows != 9 * cin {
        return Err(Error::shape(format!(
            "conv weight {rows} rows for {cin} input channels"
        )));
    }
    let src = x.data();
    let wd = weight.data();
    let mut out = vec![0.0f32; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut out[(y * w + xx) * cout..][..cout];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let px = &src[(sy as usize * w + sx as usize) * cin..][..cin];
                    let wbase = (ky * 3 + kx) * cin;
                    for (ci, &v) in px.iter().enumerate() {
                        crate::tensor::axpy(dst, v, &wd[(wbase + ci) * cout..][..cout]);
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, cout], out)
}

/// Per-position standardisation over channels, no learned affine.
fn layer_norm(x: &[f32], c: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for px in x.chunks_exact(c) {
        let mean = px.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        out.extend(px.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
    }
    out
}

fn project(x: &[f32], n: usize, weight: &Tensor) -> Result<Tensor> {
    let [k, m] = weight.dims()[..] else {
        return Err(Error::shape("projection must be rank 2"));
    };
    let mut out = vec![0.0f32; n * m];
    matmul_into(x, weight.data(), &mut out, n, k, m);
    Tensor::new(&[n, m], out)
}

fn self_attention_stage(x: Tensor, w: &SelfAttnWeights) -> Result<Tensor> {
    let (h, wd, c) = x.hwc()?;
    let n = h * wd;
    let normed = layer_norm(x.data(), c);
    let q = project(&normed, n, &w.q)?;
    let k = project(&normed, n, &w.k)?;
    let v = project(&normed, n, &w.v)?;
    let o = attention_output(&q, &k, &v, &NoHook)?;
    let mut x = x;
    for (a, b) in x.data_mut().iter_mut().zip(o.data()) {
        *a += b;
    }
    Ok(x)
}

fn cross_attention_stage(
    x: Tensor,
    context: &Tensor,
    w: &CrossAttnWeights,
    hook: &dyn ScoreHook,
    keep_probs: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (h, wd, c) = x.hwc()?;
    let n = h * wd;
    let m = context.dims()[0];
    let normed = layer_norm(x.data(), c);
    let q = project(&normed, n, &w.q)?;
    let k = project(context.data(), m, &w.k)?;
    let v = project(context.data(), m, &w.v)?;
    let (o, probs) = if keep_probs {
        let (o, p) = attention(&q, &k, &v, hook)?;
        (o, Some(p.reshape(&[h, wd, m])?))
    } else {
        (attention_output(&q, &k, &v, hook)?, None)
    };
    let mut x = x;
    for (a, b) in x.data_mut().iter_mut().zip(o.data()) {
        *a += b;
    }
    Ok((x, probs))
}
