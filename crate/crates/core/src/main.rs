use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};

use lime_core::ablate::{run_ablation, AblationInputs, Sweep};
use lime_core::config::{ConfigLayer, SEED_ENV};
use lime_core::denoiser::Denoiser;
use lime_core::edit::{segment, Pipeline};
use lime_core::eval::{background_l1, iou, run_cases, MetricReport};
use lime_core::io::{
    ensure_dir, labels_to_pgm, load_mask, load_png, mask_to_pgm, save_pgm, save_png, save_tensor,
    write_atomic,
};
use lime_core::text::{embed, StopWords};
use lime_core::{selftest, EditConfig, Error, Result};

/// Localized instruction-guided image editing with a toy diffusion denoiser.
#[derive(Parser)]
#[command(name = "lime", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment the image from diffusion features; writes seg.pgm.
    Segment {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compute the region of interest; writes roi.pgm, seg.pgm and saliency.lten.
    Localize {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the full edit; writes edited.png, roi.pgm, seg.pgm and saliency.lten.
    Edit {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare two images, optionally with masks.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Mask compared against `--mask-b` by IoU.
        #[arg(long, requires = "mask_b")]
        mask_a: Option<PathBuf>,
        #[arg(long, requires = "mask_a")]
        mask_b: Option<PathBuf>,
        /// RoI outside which the background L1 is measured.
        #[arg(long)]
        roi: Option<PathBuf>,
    },
    /// Run ablation sweeps: points, clusters, mask-type, edit-type.
    Ablate {
        #[arg(required = true)]
        sweeps: Vec<Sweep>,
        #[command(flatten)]
        run: RunArgs,
        /// Reference edited image for the image metrics.
        #[arg(long)]
        expected: Option<PathBuf>,
    },
    /// Edit every case directory (input.png, instruction.txt, optional
    /// mask.pgm and expected.png) and write report.tsv.
    Eval {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    instruction: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sampling steps; unset windows scale with it.
    #[arg(long)]
    steps: Option<usize>,
    /// Number of k-means clusters.
    #[arg(long)]
    k: Option<usize>,
    /// Number of top saliency points.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, value_parser = ["attention_reg", "token_reward", "noise_blend", "none"])]
    edit_mode: Option<String>,
    /// External RoI mask (PGM); replaces the computed one.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Stop-word list replacing the built-in one.
    #[arg(long)]
    stopwords: Option<PathBuf>,
}

impl ConfigArgs {
    /// Built-in defaults, then the seed environment variable, then the config
    /// file, then command-line flags.
    fn resolve(&self) -> Result<EditConfig> {
        let mut layer = ConfigLayer::default();
        layer.apply_env_seed(std::env::var(SEED_ENV).ok().as_deref())?;
        if let Some(path) = &self.config {
            layer.apply_file(path)?;
        }
        let mut cli = ConfigLayer::default();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
                key: kv.clone(),
                msg: "expected KEY=VALUE".into(),
            })?;
            cli.set(k.trim(), v)?;
        }
        cli.seed = self.seed.or(cli.seed);
        cli.total_steps = self.steps.or(cli.total_steps);
        cli.k_clusters = self.k.or(cli.k_clusters);
        cli.n_points = self.points.or(cli.n_points);
        if let Some(m) = &self.edit_mode {
            cli.set("edit_mode", m)?;
        }
        if let Some(m) = &self.mask {
            cli.external_mask = Some(m.clone());
        }
        // Windows not set explicitly in any layer scale with the step count.
        layer.merge(cli);
        let cfg = layer.resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn pipeline(&self, cfg: &EditConfig) -> Result<Pipeline> {
        Ok(match &self.stopwords {
            Some(path) => Pipeline::with_model(
                Box::new(Denoiser::from_seed(cfg.model_seed)),
                StopWords::load(path)?,
            ),
            None => Pipeline::new(cfg),
        })
    }
}

fn write_config(cfg: &EditConfig, out: &Path) -> Result<()> {
    write_atomic(&out.join("config.used"), cfg.to_document().as_bytes())
}

fn cmd_segment(run: &RunArgs) -> Result<()> {
    let cfg = run.config.resolve()?;
    let pipeline = run.config.pipeline(&cfg)?;
    let image = load_png(&run.image)?;
    let text = embed(&pipeline.tokenize(&run.instruction)?);
    let hooks = pipeline.localization_pass(&image, &text, &cfg)?;
    let seg = segment(&hooks, &cfg)?;
    let out = ensure_dir(&run.out)?;
    save_pgm(&labels_to_pgm(&seg)?, &out.join("seg.pgm"))?;
    write_config(&cfg, &out)?;
    println!("segments={}", seg.k);
    Ok(())
}

fn cmd_localize(run: &RunArgs) -> Result<()> {
    let cfg = run.config.resolve()?;
    let pipeline = run.config.pipeline(&cfg)?;
    let image = load_png(&run.image)?;
    let seq = pipeline.tokenize(&run.instruction)?;
    let external = cfg.external_mask.as_deref().map(load_mask).transpose()?;
    let hooks = pipeline.localization_pass(&image, &embed(&seq), &cfg)?;
    let loc = pipeline.localize(&hooks, &seq, &cfg, external.as_ref())?;
    let out = ensure_dir(&run.out)?;
    save_pgm(&mask_to_pgm(&loc.roi), &out.join("roi.pgm"))?;
    save_pgm(&labels_to_pgm(&loc.seg)?, &out.join("seg.pgm"))?;
    save_tensor(&loc.saliency.to_tensor(), &out.join("saliency.lten"))?;
    write_config(&cfg, &out)?;
    println!("roi_cells={}", loc.roi.count());
    Ok(())
}

fn cmd_edit(run: &RunArgs) -> Result<()> {
    let cfg = run.config.resolve()?;
    let pipeline = run.config.pipeline(&cfg)?;
    let image = load_png(&run.image)?;
    let result = pipeline.run(&image, &run.instruction, &cfg)?;
    let out = ensure_dir(&run.out)?;
    save_png(&result.image, &out.join("edited.png"))?;
    save_pgm(&mask_to_pgm(&result.roi), &out.join("roi.pgm"))?;
    save_pgm(&labels_to_pgm(&result.seg)?, &out.join("seg.pgm"))?;
    save_tensor(&result.saliency.to_tensor(), &out.join("saliency.lten"))?;
    write_config(&cfg, &out)?;
    println!("roi_cells={}", result.roi.count());
    Ok(())
}

fn print_field(name: &str, v: Option<f64>) {
    if let Some(v) = v {
        println!("{name}={v:.6}");
    }
}

fn cmd_metrics(
    a: &Path,
    b: &Path,
    masks: Option<(&Path, &Path)>,
    roi: Option<&Path>,
) -> Result<()> {
    let (ia, ib) = (load_png(a)?, load_png(b)?);
    let mut r = MetricReport::compare(&ia, &ib)?;
    if let Some((ma, mb)) = masks {
        r.iou = Some(iou(load_mask(ma)?.cells(), load_mask(mb)?.cells())?);
    }
    if let Some(roi) = roi {
        r.bg_l1 = background_l1(&ia, &ib, &load_mask(roi)?)?;
    }
    let names = ["l1", "mse", "psnr", "ssim", "iou", "bg_l1"];
    for (name, v) in names.iter().zip(r.fields()) {
        print_field(name, v);
    }
    Ok(())
}

fn cmd_ablate(sweeps: &[Sweep], run: &RunArgs, expected: Option<&Path>) -> Result<bool> {
    let mut cfg = run.config.resolve()?;
    // The mask flag supplies the ground truth here rather than replacing the RoI.
    let gt = cfg
        .external_mask
        .take()
        .map(|p| load_mask(&p))
        .transpose()?;
    if sweeps.contains(&Sweep::MaskType) && gt.is_none() {
        return Err(Error::InvalidArgument(
            "the mask-type sweep needs a ground-truth mask (--mask)".into(),
        ));
    }
    let image = load_png(&run.image)?;
    let expected = expected.map(load_png).transpose()?;
    let inputs = AblationInputs {
        image: &image,
        instruction: &run.instruction,
        expected: expected.as_ref(),
        gt_mask: gt.as_ref(),
    };
    let report = run_ablation(&cfg, &inputs, sweeps, &run.out)?;
    print!("{}", report.render());
    Ok(report.failures.is_empty())
}

fn cmd_eval(cases: &Path, out: &Path, config: &ConfigArgs) -> Result<bool> {
    let cfg = config.resolve()?;
    let report = run_cases(cases, &cfg, out)?;
    print!("{}", report.render());
    Ok(report.failures.is_empty())
}

fn cmd_selftest() -> bool {
    let mut ok = true;
    for check in selftest::run_all() {
        match &check.outcome {
            Ok(()) => println!("ok   {}", check.name),
            Err(msg) => {
                ok = false;
                println!("FAIL {}: {msg}", check.name);
            }
        }
    }
    ok
}

fn dispatch(cmd: &Command) -> Result<bool> {
    match cmd {
        Command::Segment { run } => cmd_segment(run).map(|_| true),
        Command::Localize { run } => cmd_localize(run).map(|_| true),
        Command::Edit { run } => cmd_edit(run).map(|_| true),
        Command::Metrics {
            a,
            b,
            mask_a,
            mask_b,
            roi,
        } => {
            let masks = mask_a.as_deref().zip(mask_b.as_deref());
            cmd_metrics(a, b, masks, roi.as_deref()).map(|_| true)
        }
        Command::Ablate {
            sweeps,
            run,
            expected,
        } => cmd_ablate(sweeps, run, expected.as_deref()),
        Command::Eval { cases, out, config } => cmd_eval(cases, out, config),
        Command::Selftest => Ok(cmd_selftest()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            // Not every parse error carries the usage line; always show it.
            if !e.render().to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    info!("lime {}", env!("CARGO_PKG_VERSION"));
    match dispatch(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            warn!("completed with failures");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
