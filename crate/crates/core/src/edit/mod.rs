//! Edit application: attention regularization, the token-reward variant, latent
//! noise blending, and the two-pass localize-then-edit pipeline.

pub mod regularize;

use log::{debug, info};

use crate::config::{Clustering, EditConfig, EditMode};
use crate::denoiser::{AttnDirective, CaptureConfig, Denoiser, HookRecord, NoisePredictor};
use crate::error::{Error, Result};
use crate::guidance::{
    decode_latent, initial_latent, sample, Guidance, PassConfig, Trajectory, IMAGE_RES,
};
use crate::io::load_mask;
use crate::localization::{
    agglomerative, aggregate_attention, extract_roi, fuse_features, kmeans, top_n_points, LabelMap,
    RoIMask, SaliencyMap, SEG_RES,
};
use crate::tensor::{nearest_resize_grid, Tensor};
use crate::text::{embed, tokenize, StopWords, TextEmbedding, TokenSequence};

/// Side of the grid agglomerative clustering runs on; its labels are upsampled
/// to the full segmentation size.
pub const AGGLOMERATIVE_RES: usize = 32;

/// `m ⊙ z_edit + (1 - m) ⊙ z_orig` with the 64×64 mask broadcast over channels.
/// Values are selected, not mixed, so unmasked cells equal `z_orig` exactly.
pub fn blend_noise(z_edit: &Tensor, z_orig: &Tensor, m: &RoIMask) -> Result<Tensor> {
    z_edit.expect_same_dims(z_orig)?;
    let (h, w, c) = z_edit.hwc()?;
    if h * w != m.cells().len() {
        return Err(Error::shape(format!(
            "mask of {} cells for a {h}×{w} latent",
            m.cells().len()
        )));
    }
    let mut out = z_orig.clone();
    for ((dst, src), &inside) in out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(z_edit.data().chunks_exact(c))
        .zip(m.cells())
    {
        if inside {
            dst.copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Everything the localization stage produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub seg: LabelMap,
    pub saliency: SaliencyMap,
    /// Top-N saliency cells (empty when an external mask was used).
    pub points: Vec<(usize, usize)>,
    pub roi: RoIMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    /// `256×256×3`, values in `[0, 1]`.
    pub image: Tensor,
    pub roi: RoIMask,
    pub saliency: SaliencyMap,
    pub seg: LabelMap,
    pub points: Vec<(usize, usize)>,
    /// Decode of the instruction-free trajectory, present in noise-blend mode.
    pub reconstruction: Option<Tensor>,
    pub config: EditConfig,
}

/// Denoiser plus stop-word list; runs the pipeline stages.
pub struct Pipeline {
    model: Box<dyn NoisePredictor>,
    stopwords: StopWords,
}

impl Pipeline {
    /// Denoiser seeded from `cfg.model_seed` and the built-in stop words.
    pub fn new(cfg: &EditConfig) -> Self {
        Self::with_model(
            Box::new(Denoiser::from_seed(cfg.model_seed)),
            StopWords::default(),
        )
    }

    pub fn with_model(model: Box<dyn NoisePredictor>, stopwords: StopWords) -> Self {
        Self { model, stopwords }
    }

    pub fn model(&self) -> &dyn NoisePredictor {
        &*self.model
    }

    pub fn tokenize(&self, instruction: &str) -> Result<TokenSequence> {
        tokenize(instruction, &self.stopwords)
    }

    /// First pass: guided sampling with the localization scales, recording
    /// features and cross-attention maps within their windows. The hooks are
    /// identical to those of a full-length run.
    pub fn localization_pass(
        &self,
        image: &Tensor,
        text: &TextEmbedding,
        cfg: &EditConfig,
    ) -> Result<HookRecord> {
        let pass = PassConfig {
            total_steps: cfg.total_steps,
            guidance: Guidance {
                s_i: cfg.s_i_loc as f32,
                s_t: cfg.s_t_loc as f32,
            },
            capture: CaptureConfig {
                features: Some(cfg.feature_window),
                attn: Some(cfg.attn_window),
            },
            directive: AttnDirective::none(),
            directive_window: None,
        };
        // Only the recorded hooks are used, so stop after the last capture step.
        let last = cfg
            .feature_window
            .hi
            .max(cfg.attn_window.hi)
            .min(cfg.total_steps);
        let z = initial_latent(image, cfg.seed)?;
        let mut traj = Trajectory::new(self.model(), image, text, z, pass)?;
        for _ in 0..last {
            traj.step()?;
        }
        Ok(traj.finish().hooks)
    }

    /// Segment, score and select the RoI from recorded hooks.
    pub fn localize(
        &self,
        hooks: &HookRecord,
        seq: &TokenSequence,
        cfg: &EditConfig,
        external: Option<&RoIMask>,
    ) -> Result<Localization> {
        select_roi(hooks, seq, cfg, segment(hooks, cfg)?, external)
    }

    /// Second pass: guided sampling with the edit scales under `cfg.edit_mode`.
    /// Returns the edited image and, in noise-blend mode, the reconstruction.
    pub fn edit_pass(
        &self,
        image: &Tensor,
        seq: &TokenSequence,
        text: &TextEmbedding,
        roi: &RoIMask,
        cfg: &EditConfig,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let guidance = Guidance {
            s_i: cfg.s_i_edit as f32,
            s_t: cfg.s_t_edit as f32,
        };
        let pass = |directive: AttnDirective, g: Guidance| PassConfig {
            total_steps: cfg.total_steps,
            guidance: g,
            capture: CaptureConfig::none(),
            directive,
            directive_window: Some(cfg.reg_window),
        };
        let directive = match cfg.edit_mode {
            EditMode::AttentionReg => {
                AttnDirective::regularize(roi.clone(), seq.unrelated_indices())
            }
            EditMode::TokenReward => AttnDirective::reward(roi.clone(), seq.related_indices()),
            EditMode::NoiseBlend | EditMode::None => AttnDirective::none(),
        };
        if cfg.edit_mode != EditMode::NoiseBlend {
            let run = sample(
                self.model(),
                image,
                text,
                cfg.seed,
                pass(directive, guidance),
            )?;
            return Ok((decode_latent(&run.z0)?, None));
        }
        let z_t = initial_latent(image, cfg.seed)?;
        let recon_guidance = Guidance {
            s_i: guidance.s_i,
            s_t: 0.0,
        };
        let mut edit = Trajectory::new(
            self.model(),
            image,
            text,
            z_t.clone(),
            pass(directive, guidance),
        )?;
        let mut orig = Trajectory::new(
            self.model(),
            image,
            text,
            z_t,
            pass(AttnDirective::none(), recon_guidance),
        )?;
        while !edit.is_done() {
            edit.step()?;
            orig.step()?;
            let blended = blend_noise(edit.latent(), orig.latent(), roi)?;
            edit.set_latent(blended)?;
        }
        let edited = decode_latent(&edit.finish().z0)?;
        let recon = decode_latent(&orig.finish().z0)?;
        Ok((edited, Some(recon)))
    }

    /// Both passes end to end.
    pub fn run(&self, image: &Tensor, instruction: &str, cfg: &EditConfig) -> Result<EditResult> {
        cfg.validate()?;
        check_image(image)?;
        let seq = self.tokenize(instruction)?;
        let text = embed(&seq);
        let external = cfg.external_mask.as_deref().map(load_mask).transpose()?;
        info!("localization pass ({} steps)", cfg.total_steps);
        let hooks = self.localization_pass(image, &text, cfg)?;
        let loc = self.localize(&hooks, &seq, cfg, external.as_ref())?;
        info!("edit pass ({}, {} steps)", cfg.edit_mode, cfg.total_steps);
        let (edited, reconstruction) = self.edit_pass(image, &seq, &text, &loc.roi, cfg)?;
        Ok(EditResult {
            image: edited,
            roi: loc.roi,
            saliency: loc.saliency,
            seg: loc.seg,
            points: loc.points,
            reconstruction,
            config: cfg.clone(),
        })
    }
}

/// Convenience wrapper: a fresh [`Pipeline`] for `cfg`, run once.
pub fn run_pipeline(image: &Tensor, instruction: &str, cfg: &EditConfig) -> Result<EditResult> {
    Pipeline::new(cfg).run(image, instruction, cfg)
}

/// Score saliency from the attention hooks and pick the RoI on `seg`, or take
/// `external` as the RoI when given.
pub fn select_roi(
    hooks: &HookRecord,
    seq: &TokenSequence,
    cfg: &EditConfig,
    seg: LabelMap,
    external: Option<&RoIMask>,
) -> Result<Localization> {
    let has_related = !seq.related_word_indices().is_empty();
    if !has_related && external.is_none() {
        return Err(Error::LocalizationImpossible);
    }
    let saliency = if has_related {
        aggregate_attention(hooks, &seq.related_indices())?
    } else {
        SaliencyMap::zeros()
    };
    let (points, roi) = match external {
        Some(m) => (Vec::new(), m.clone()),
        None => {
            let points = top_n_points(&saliency, cfg.n_points)?;
            let roi = extract_roi(&seg, &points)?;
            (points, roi)
        }
    };
    debug!("RoI covers {} of 4096 latent cells", roi.count());
    Ok(Localization {
        seg,
        saliency,
        points,
        roi,
    })
}

/// Cluster the fused features into a 256×256 label map.
pub fn segment(hooks: &HookRecord, cfg: &EditConfig) -> Result<LabelMap> {
    match cfg.clustering {
        Clustering::Kmeans => kmeans(&fuse_features(hooks, SEG_RES)?, cfg.k_clusters, cfg.seed),
        Clustering::Agglomerative => {
            let coarse = agglomerative(
                &fuse_features(hooks, AGGLOMERATIVE_RES)?,
                cfg.agglo_threshold,
            )?;
            let labels = nearest_resize_grid(
                &coarse.labels,
                AGGLOMERATIVE_RES,
                AGGLOMERATIVE_RES,
                SEG_RES,
                SEG_RES,
            )?;
            LabelMap::new(SEG_RES, labels, coarse.k)
        }
    }
}

fn check_image(image: &Tensor) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    if (h, w, c) != (IMAGE_RES, IMAGE_RES, 3) {
        return Err(Error::shape(format!(
            "image must be {IMAGE_RES}×{IMAGE_RES}×3, got {:?}",
            image.dims()
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "image values must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}
