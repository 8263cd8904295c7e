//! Latent codec, noise schedule, classifier-free guidance and the sampler loop.

use crate::denoiser::{
    AttnDirective, CaptureConfig, HookRecord, NoisePredictor, StepInfo, StepWindow, LATENT_CHANNELS,
};
use crate::error::{Error, Result};
use crate::localization::{LATENT_RES, SEG_RES};
use crate::prng::Prng;
use crate::tensor::{avg_pool, bilinear_resize, Tensor};
use crate::text::TextEmbedding;

pub const IMAGE_RES: usize = SEG_RES;

/// `σ` for each boundary of the step loop: `sigma[0] = 1.0` before the first
/// step, decreasing linearly to `sigma[total_steps] = 0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub sigma: Vec<f32>,
}

impl Schedule {
    pub fn new(total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument(
                "total_steps must be positive".into(),
            ));
        }
        let sigma = (0..=total_steps)
            .map(|i| 1.0 - i as f32 / total_steps as f32)
            .collect();
        Ok(Self { total_steps, sigma })
    }

    /// Step `index` (1-based) moves from `sigma[index - 1]` to `sigma[index]`.
    pub fn delta(&self, index: usize) -> f32 {
        self.sigma[index] - self.sigma[index - 1]
    }
}

/// `256×256×3` image → `64×64×4` latent: 4×4 average pool, zero fourth channel.
pub fn encode_latent(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    if (h, w, c) != (IMAGE_RES, IMAGE_RES, 3) {
        return Err(Error::shape(format!(
            "image must be {IMAGE_RES}×{IMAGE_RES}×3, got {:?}",
            image.dims()
        )));
    }
    let pooled = avg_pool(image, IMAGE_RES / LATENT_RES)?;
    let mut out = Vec::with_capacity(LATENT_RES * LATENT_RES * LATENT_CHANNELS);
    for px in pooled.data().chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(0.0);
    }
    Tensor::new(&[LATENT_RES, LATENT_RES, LATENT_CHANNELS], out)
}

/// `64×64×4` latent → `256×256×3` image in `[0, 1]`: bilinear upsample of the
/// first three channels.
pub fn decode_latent(z: &Tensor) -> Result<Tensor> {
    check_latent(z, "latent")?;
    let rgb: Vec<f32> = z
        .data()
        .chunks_exact(LATENT_CHANNELS)
        .flat_map(|px| px[..3].iter().copied())
        .collect();
    let rgb = Tensor::new(&[LATENT_RES, LATENT_RES, 3], rgb)?;
    Ok(bilinear_resize(&rgb, IMAGE_RES, IMAGE_RES)?.map(|v| v.clamp(0.0, 1.0)))
}

fn check_latent(z: &Tensor, what: &str) -> Result<()> {
    let want = [LATENT_RES, LATENT_RES, LATENT_CHANNELS];
    if z.dims() != want {
        return Err(Error::shape(format!(
            "{what} must be {want:?}, got {:?}",
            z.dims()
        )));
    }
    Ok(())
}

/// Guidance scales `(s_I, s_T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub s_i: f32,
    pub s_t: f32,
}

impl Guidance {
    /// Per-branch weights of `e_uu + s_I (e_iu - e_uu) + s_T (e_it - e_iu)`
    /// regrouped as `w_uu e_uu + w_iu e_iu + w_it e_it`.
    pub fn weights(&self) -> [f32; 3] {
        [1.0 - self.s_i, self.s_i - self.s_t, self.s_t]
    }
}

/// Combine the three branch predictions.
///
/// Evaluated as the equivalent weighted sum `(1 - s_I) e_uu + (s_I - s_T) e_iu +
/// s_T e_it`, skipping zero-weight terms; this makes `s_I = 1, s_T = 1` return
/// `e_it` and `s_I = 1, s_T = 0` return `e_iu` bit for bit.
pub fn cfg_combine(
    e_uu: &Tensor,
    e_iu: &Tensor,
    e_it: &Tensor,
    s_i: f32,
    s_t: f32,
) -> Result<Tensor> {
    e_uu.expect_same_dims(e_iu)?;
    e_uu.expect_same_dims(e_it)?;
    let w = Guidance { s_i, s_t }.weights();
    Ok(combine_weighted(
        &[(w[0], Some(e_uu)), (w[1], Some(e_iu)), (w[2], Some(e_it))],
        e_uu.dims(),
    ))
}

fn combine_weighted(terms: &[(f32, Option<&Tensor>)], dims: &[usize]) -> Tensor {
    let mut acc: Option<Tensor> = None;
    for &(w, t) in terms {
        if w == 0.0 {
            continue;
        }
        let t = t.expect("non-zero weight branches are evaluated");
        acc = Some(match acc {
            None => t.map(|v| w * v),
            Some(a) => a.zip_map(t, |x, v| x + w * v).expect("same dims"),
        });
    }
    acc.unwrap_or_else(|| Tensor::zeros(dims).expect("latent dims"))
}

/// Conditioning and controls for one sampler trajectory.
#[derive(Debug, Clone)]
pub struct PassConfig {
    pub total_steps: usize,
    pub guidance: Guidance,
    pub capture: CaptureConfig,
    pub directive: AttnDirective,
    /// Steps at which `directive` is forwarded; `None` means every step.
    pub directive_window: Option<StepWindow>,
}

/// Result of a full sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub z0: Tensor,
    pub hooks: HookRecord,
}

/// `encode_latent(image) + σ_T ε`, with `ε ~ N(0, 1)` drawn from `Prng(seed)` in
/// row-major order.
pub fn initial_latent(image: &Tensor, seed: u64) -> Result<Tensor> {
    let mut z = encode_latent(image)?;
    let mut rng = Prng::new(seed);
    for v in z.data_mut() {
        *v += rng.next_gaussian() as f32;
    }
    Ok(z)
}

/// One sampler trajectory, advanced a step at a time so several trajectories can
/// run in lock-step.
pub struct Trajectory<'a> {
    model: &'a dyn NoisePredictor,
    schedule: Schedule,
    c_image: Tensor,
    c_text: &'a TextEmbedding,
    pass: PassConfig,
    z: Tensor,
    next: usize,
    hooks: HookRecord,
}

impl<'a> Trajectory<'a> {
    pub fn new(
        model: &'a dyn NoisePredictor,
        image: &Tensor,
        text: &'a TextEmbedding,
        z_start: Tensor,
        pass: PassConfig,
    ) -> Result<Self> {
        if pass.total_steps < 2 {
            return Err(Error::InvalidArgument(
                "total_steps must be at least 2".into(),
            ));
        }
        check_latent(&z_start, "initial latent")?;
        Ok(Self {
            model,
            schedule: Schedule::new(pass.total_steps)?,
            c_image: encode_latent(image)?,
            c_text: text,
            pass,
            z: z_start,
            next: 1,
            hooks: HookRecord::default(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.next > self.schedule.total_steps
    }

    pub fn latent(&self) -> &Tensor {
        &self.z
    }

    /// Replace the current latent (used for latent-space blending between steps).
    pub fn set_latent(&mut self, z: Tensor) -> Result<()> {
        check_latent(&z, "latent")?;
        self.z = z;
        Ok(())
    }

    /// Run the next denoising step: three guidance branches, combination, Euler
    /// update. Branches with zero guidance weight are skipped unless they have
    /// something to record at this step.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::InvalidArgument("trajectory already finished".into()));
        }
        let index = self.next;
        let info = StepInfo {
            index,
            total: self.schedule.total_steps,
        };
        let pass = &self.pass;
        let [w_uu, w_iu, w_it] = pass.guidance.weights();
        let none = AttnDirective::none();
        let directive = match pass.directive_window {
            Some(w) if !w.contains(index) => &none,
            _ => &pass.directive,
        };
        let records_features = pass.capture.features.is_some_and(|w| w.contains(index));
        let records_attn = pass.capture.attn.is_some_and(|w| w.contains(index));

        let model = self.model;
        let z = &self.z;
        let e_uu = if w_uu != 0.0 {
            Some(model.predict(z, info, None, None, &none, &pass.capture)?.0)
        } else {
            None
        };
        let e_iu = if w_iu != 0.0 || records_features {
            let (e, h) = model.predict(z, info, Some(&self.c_image), None, &none, &pass.capture)?;
            self.hooks.merge(h);
            Some(e)
        } else {
            None
        };
        let e_it = if w_it != 0.0 || records_attn {
            let (e, h) = model.predict(
                z,
                info,
                Some(&self.c_image),
                Some(self.c_text),
                directive,
                &pass.capture,
            )?;
            self.hooks.merge(h);
            Some(e)
        } else {
            None
        };
        let guided = combine_weighted(
            &[
                (w_uu, e_uu.as_ref()),
                (w_iu, e_iu.as_ref()),
                (w_it, e_it.as_ref()),
            ],
            z.dims(),
        );
        let d = self.schedule.delta(index);
        self.z = self.z.zip_map(&guided, |v, e| v + d * e)?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(self) -> SampleRun {
        SampleRun {
            z0: self.z,
            hooks: self.hooks,
        }
    }
}

/// Full sampler run from `z_T = encode_latent(image) + ε(seed)`.
pub fn sample(
    model: &dyn NoisePredictor,
    image: &Tensor,
    text: &TextEmbedding,
    seed: u64,
    pass: PassConfig,
) -> Result<SampleRun> {
    let z = initial_latent(image, seed)?;
    let mut traj = Trajectory::new(model, image, text, z, pass)?;
    while !traj.is_done() {
        traj.step()?;
    }
    Ok(traj.finish())
}
