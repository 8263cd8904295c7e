//! Pixel metrics and the case-directory evaluation harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::config::EditConfig;
use crate::edit::Pipeline;
use crate::error::{Error, Result};
use crate::io::{load_mask, load_png, mask_to_pgm, read_text, save_pgm, save_png, write_atomic};
use crate::localization::{RoIMask, LATENT_RES};
use crate::tensor::{nearest_resize_grid, Tensor};

pub const PSNR_CAP: f64 = 99.0;
const PSNR_CAP_MSE: f64 = 1e-10;
const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub const REPORT_HEADER: &str = "case\tl1\tmse\tpsnr\tssim\tiou\tbg_l1";
pub const REPORT_FILE: &str = "report.tsv";

fn same_dims(a: &Tensor, b: &Tensor) -> Result<()> {
    a.expect_same_dims(b)
}

/// Mean absolute difference over all values.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    Ok(s / a.len() as f64)
}

/// Mean squared difference over all values.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(1 / mse)` on a unit value range, capped at 99 dB when `mse < 1e-10`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_CAP_MSE {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    mse(a, b).map(psnr_from_mse)
}

/// Single-scale SSIM of two `H×W×C` images: 8×8 uniform windows at stride 8,
/// population statistics, averaged over windows and channels. Images smaller
/// than a window are treated as one window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, c) = a.hwc()?;
    let wh = SSIM_WINDOW.min(h);
    let ww = SSIM_WINDOW.min(w);
    let (ny, nx) = (h / wh, w / ww);
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        for by in 0..ny {
            for bx in 0..nx {
                let at = |t: &Tensor, y: usize, x: usize| {
                    t.data()[((by * wh + y) * w + bx * ww + x) * c + ch] as f64
                };
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..wh {
                    for x in 0..ww {
                        ma += at(a, y, x);
                        mb += at(b, y, x);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..wh {
                    for x in 0..ww {
                        let (da, db) = (at(a, y, x) - ma, at(b, y, x) - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
            }
        }
    }
    Ok(total / (c * ny * nx) as f64)
}

/// Intersection over union of two binary masks; two empty masks score 1.
pub fn iou(m1: &[bool], m2: &[bool]) -> Result<f64> {
    if m1.len() != m2.len() {
        return Err(Error::shape(format!(
            "masks of {} and {} cells",
            m1.len(),
            m2.len()
        )));
    }
    let inter = m1.iter().zip(m2).filter(|(a, b)| **a && **b).count();
    let union = m1.iter().zip(m2).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean absolute difference over pixels outside the RoI (each latent cell
/// covers a block of the image). `None` when the RoI covers everything.
pub fn background_l1(a: &Tensor, b: &Tensor, roi: &RoIMask) -> Result<Option<f64>> {
    same_dims(a, b)?;
    let (h, w, c) = a.hwc()?;
    let inside = nearest_resize_grid(roi.cells(), LATENT_RES, LATENT_RES, h, w)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (px, &m) in inside.iter().enumerate() {
        if m {
            continue;
        }
        for ch in 0..c {
            let i = px * c + ch;
            sum += (a.data()[i] as f64 - b.data()[i] as f64).abs();
        }
        count += c;
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// One report row; absent comparisons are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub l1: Option<f64>,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub iou: Option<f64>,
    pub bg_l1: Option<f64>,
}

impl MetricReport {
    /// Image comparison fields filled from `a` vs `b`.
    pub fn compare(a: &Tensor, b: &Tensor) -> Result<Self> {
        let m = mse(a, b)?;
        Ok(Self {
            l1: Some(l1(a, b)?),
            mse: Some(m),
            psnr: Some(psnr_from_mse(m)),
            ssim: Some(ssim(a, b)?),
            iou: None,
            bg_l1: None,
        })
    }

    pub fn fields(&self) -> [Option<f64>; 6] {
        [
            self.l1, self.mse, self.psnr, self.ssim, self.iou, self.bg_l1,
        ]
    }
}

fn fmt_field(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

/// Render rows as `report.tsv`: header, one line per row in the given order,
/// optionally a `mean` line, then `#`-prefixed failure notes.
pub fn render_report(
    rows: &[(String, MetricReport)],
    failures: &[(String, String)],
    with_mean: bool,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{REPORT_HEADER}");
    for (name, r) in rows {
        let fields: Vec<String> = r.fields().iter().map(|&v| fmt_field(v)).collect();
        let _ = writeln!(s, "{name}\t{}", fields.join("\t"));
    }
    if with_mean && !rows.is_empty() {
        let means: Vec<String> = (0..6)
            .map(|i| {
                let vals: Vec<f64> = rows.iter().filter_map(|(_, r)| r.fields()[i]).collect();
                fmt_field((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
            })
            .collect();
        let _ = writeln!(s, "mean\t{}", means.join("\t"));
    }
    for (name, msg) in failures {
        let msg = msg.replace(['\n', '\t'], " ");
        let _ = writeln!(s, "# failed\t{name}\t{msg}");
    }
    s
}

/// Outcome of a harness run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CasesReport {
    pub rows: Vec<(String, MetricReport)>,
    pub failures: Vec<(String, String)>,
}

impl CasesReport {
    pub fn render(&self) -> String {
        render_report(&self.rows, &self.failures, true)
    }
}

/// Run every case subdirectory of `dir` (sorted by name) through the pipeline
/// and write `report.tsv` plus per-case `edited.png` and `roi.pgm` under `out`.
///
/// A case holds `input.png` and `instruction.txt`, optionally `mask.pgm`
/// (ground-truth RoI, scored by IoU) and `expected.png` (reference output).
/// Failing cases are reported and skipped.
pub fn run_cases(dir: &Path, cfg: &EditConfig, out: &Path) -> Result<CasesReport> {
    let mut cases: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .filter(|(name, _)| !name.starts_with('.'))
        .collect();
    cases.sort();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let pipeline = Pipeline::new(cfg);
    let mut report = CasesReport::default();
    for (name, path) in cases {
        info!("case {name}");
        match run_case(&pipeline, &path, cfg, &out.join(&name)) {
            Ok(r) => report.rows.push((name, r)),
            Err(e) => {
                warn!("case {name} failed: {e}");
                report.failures.push((name, e.to_string()));
            }
        }
    }
    write_atomic(&out.join(REPORT_FILE), report.render().as_bytes())?;
    Ok(report)
}

fn run_case(pipeline: &Pipeline, dir: &Path, cfg: &EditConfig, out: &Path) -> Result<MetricReport> {
    let input = load_png(&dir.join("input.png"))?;
    let instruction = read_text(&dir.join("instruction.txt"))?;
    let expected_path = dir.join("expected.png");
    let expected = expected_path
        .exists()
        .then(|| load_png(&expected_path))
        .transpose()?;
    let mask_path = dir.join("mask.pgm");
    let gt = mask_path
        .exists()
        .then(|| load_mask(&mask_path))
        .transpose()?;

    let result = pipeline.run(&input, instruction.trim(), cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_png(&result.image, &out.join("edited.png"))?;
    save_pgm(&mask_to_pgm(&result.roi), &out.join("roi.pgm"))?;

    let mut r = match &expected {
        Some(exp) => MetricReport::compare(&result.image, exp)?,
        None => MetricReport::default(),
    };
    r.iou = gt.map(|g| iou(g.cells(), result.roi.cells())).transpose()?;
    r.bg_l1 = background_l1(&result.image, &input, &result.roi)?;
    Ok(r)
}
