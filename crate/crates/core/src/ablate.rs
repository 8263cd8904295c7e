//! Ablation sweeps over localization and edit settings. The localization pass
//! is run once and its hooks are reused by every variant.

use std::collections::btree_map::{BTreeMap, Entry};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};

use crate::config::{EditConfig, EditMode};
use crate::edit::{segment, select_roi, Pipeline};
use crate::error::{Error, Result};
use crate::eval::{background_l1, iou, render_report, MetricReport, REPORT_FILE};
use crate::io::{ensure_dir, mask_to_pgm, save_pgm, save_png, write_atomic};
use crate::localization::{LabelMap, RoIMask};
use crate::tensor::Tensor;
use crate::text::embed;

pub const POINT_GRID: [usize; 4] = [25, 100, 225, 400];
pub const CLUSTER_GRID: [usize; 4] = [4, 8, 16, 32];
pub const EDIT_TYPES: [EditMode; 2] = [EditMode::AttentionReg, EditMode::NoiseBlend];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    /// Number of top saliency points.
    Points,
    /// Number of k-means clusters.
    Clusters,
    /// Computed RoI versus an externally supplied mask.
    MaskType,
    /// Attention regularization versus latent noise blending.
    EditType,
}

impl Sweep {
    pub const ALL: [Sweep; 4] = [
        Sweep::Points,
        Sweep::Clusters,
        Sweep::MaskType,
        Sweep::EditType,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sweep::Points => "points",
            Sweep::Clusters => "clusters",
            Sweep::MaskType => "mask-type",
            Sweep::EditType => "edit-type",
        }
    }

    pub fn variants(self) -> Vec<Variant> {
        match self {
            Sweep::Points => POINT_GRID.iter().map(|&n| Variant::Points(n)).collect(),
            Sweep::Clusters => CLUSTER_GRID.iter().map(|&k| Variant::Clusters(k)).collect(),
            Sweep::MaskType => vec![
                Variant::Mask(MaskSource::Ours),
                Variant::Mask(MaskSource::External),
            ],
            Sweep::EditType => EDIT_TYPES.iter().map(|&m| Variant::Edit(m)).collect(),
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Sweep::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Sweep::ALL.iter().map(|w| w.name()).collect();
                format!(
                    "unknown sweep `{s}` (expected one of: {})",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Ours,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Points(usize),
    Clusters(usize),
    Mask(MaskSource),
    Edit(EditMode),
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Points(n) => write!(f, "points={n}"),
            Variant::Clusters(k) => write!(f, "clusters={k}"),
            Variant::Mask(MaskSource::Ours) => f.write_str("mask=ours"),
            Variant::Mask(MaskSource::External) => f.write_str("mask=external"),
            Variant::Edit(m) => write!(f, "edit={m}"),
        }
    }
}

/// Inputs shared by every variant.
pub struct AblationInputs<'a> {
    pub image: &'a Tensor,
    pub instruction: &'a str,
    /// Reference output; edited images are compared with the input otherwise.
    pub expected: Option<&'a Tensor>,
    /// Ground-truth RoI: scored by IoU and used as the external mask.
    pub gt_mask: Option<&'a RoIMask>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<(String, MetricReport)>,
    pub failures: Vec<(String, String)>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        render_report(&self.rows, &self.failures, false)
    }
}

/// Run the given sweeps and write `report.tsv` plus per-variant `edited.png`
/// and `roi.pgm` under `out`. Variants that fail are reported and skipped.
pub fn run_ablation(
    cfg: &EditConfig,
    inputs: &AblationInputs<'_>,
    sweeps: &[Sweep],
    out: &Path,
) -> Result<AblationReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let pipeline = Pipeline::new(cfg);
    let seq = pipeline.tokenize(inputs.instruction)?;
    let text = embed(&seq);
    info!(
        "localization pass ({} steps), shared by all variants",
        cfg.total_steps
    );
    let hooks = pipeline.localization_pass(inputs.image, &text, cfg)?;

    let mut segments: BTreeMap<usize, LabelMap> = BTreeMap::new();
    let mut report = AblationReport::default();
    for variant in sweeps.iter().flat_map(|s| s.variants()) {
        let name = variant.to_string();
        info!("variant {name}");
        let mut vcfg = cfg.clone();
        let mut external = None;
        match variant {
            Variant::Points(n) => vcfg.n_points = n,
            Variant::Clusters(k) => vcfg.k_clusters = k,
            Variant::Mask(MaskSource::Ours) => {}
            Variant::Mask(MaskSource::External) => external = inputs.gt_mask,
            Variant::Edit(m) => vcfg.edit_mode = m,
        }
        let outcome = (|| -> Result<MetricReport> {
            if variant == Variant::Mask(MaskSource::External) && external.is_none() {
                return Err(Error::InvalidArgument(
                    "the external mask variant needs a ground-truth mask".into(),
                ));
            }
            let seg = match segments.entry(vcfg.k_clusters) {
                Entry::Occupied(e) => e.get().clone(),
                Entry::Vacant(e) => e.insert(segment(&hooks, &vcfg)?).clone(),
            };
            let loc = select_roi(&hooks, &seq, &vcfg, seg, external)?;
            let (edited, _) = pipeline.edit_pass(inputs.image, &seq, &text, &loc.roi, &vcfg)?;
            let dir = ensure_dir(&out.join(&name))?;
            save_png(&edited, &dir.join("edited.png"))?;
            save_pgm(&mask_to_pgm(&loc.roi), &dir.join("roi.pgm"))?;
            let mut r = MetricReport::compare(&edited, inputs.expected.unwrap_or(inputs.image))?;
            r.iou = inputs
                .gt_mask
                .map(|g| iou(g.cells(), loc.roi.cells()))
                .transpose()?;
            r.bg_l1 = background_l1(&edited, inputs.image, &loc.roi)?;
            Ok(r)
        })();
        match outcome {
            Ok(r) => report.rows.push((name, r)),
            Err(e) => {
                warn!("variant {name} failed: {e}");
                report.failures.push((name, e.to_string()));
            }
        }
    }
    write_atomic(&out.join(REPORT_FILE), report.render().as_bytes())?;
    write_atomic(&out.join("config.used"), cfg.to_document().as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let names: Vec<String> = Sweep::Points
            .variants()
            .iter()
            .map(|v| v.to_string())
            .collect();
        assert_eq!(
            names,
            ["points=25", "points=100", "points=225", "points=400"]
        );
        let names: Vec<String> = Sweep::Clusters
            .variants()
            .iter()
            .map(|v| v.to_string())
            .collect();
        assert_eq!(
            names,
            ["clusters=4", "clusters=8", "clusters=16", "clusters=32"]
        );
        assert_eq!(Sweep::MaskType.variants().len(), 2);
        assert_eq!(
            Sweep::EditType.variants()[1].to_string(),
            "edit=noise_blend"
        );
        for s in Sweep::ALL {
            assert_eq!(s.name().parse::<Sweep>().unwrap(), s);
        }
        assert!("bogus".parse::<Sweep>().is_err());
    }
}
