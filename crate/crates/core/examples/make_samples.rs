//! Regenerate the synthetic sample image and evaluation cases under `assets/`.
//!
//! ```text
//! cargo run --example make_samples [-- OUT_DIR]
//! ```

use std::path::{Path, PathBuf};

use lime_core::io::{ensure_dir, mask_to_pgm, save_pgm, save_png, write_atomic};
use lime_core::localization::RoIMask;
use lime_core::{Result, Tensor};

const SIDE: usize = 256;

/// A scene assigns every pixel a region id; regions are painted with a palette.
struct Scene {
    regions: Vec<u8>,
    palette: Vec<[f32; 3]>,
}

impl Scene {
    fn new(region_of: impl Fn(f32, f32) -> u8, palette: Vec<[f32; 3]>) -> Self {
        let regions = (0..SIDE * SIDE)
            .map(|i| region_of((i / SIDE) as f32 + 0.5, (i % SIDE) as f32 + 0.5))
            .collect();
        Self { regions, palette }
    }

    /// Paint with a faint vertical shading so regions are not perfectly flat.
    fn render(&self) -> Tensor {
        let mut t = Tensor::zeros(&[SIDE, SIDE, 3]).expect("valid dims");
        for (i, px) in t.data_mut().chunks_exact_mut(3).enumerate() {
            let shade = 0.92 + 0.08 * (i / SIDE) as f32 / SIDE as f32;
            let colour = self.palette[self.regions[i] as usize];
            for (p, c) in px.iter_mut().zip(colour) {
                *p = (c * shade).clamp(0.0, 1.0);
            }
        }
        t
    }

    fn recoloured(&self, region: u8, colour: [f32; 3]) -> Scene {
        let mut palette = self.palette.clone();
        palette[region as usize] = colour;
        Scene {
            regions: self.regions.clone(),
            palette,
        }
    }

    /// Latent-resolution mask: a cell is set when most of its 4×4 pixels
    /// belong to `region`.
    fn mask(&self, region: u8) -> RoIMask {
        RoIMask::from_fn(|r, c| {
            let hits = (0..16)
                .filter(|k| self.regions[(r * 4 + k / 4) * SIDE + c * 4 + k % 4] == region)
                .count();
            hits >= 8
        })
    }
}

fn inside_ellipse(y: f32, x: f32, cy: f32, cx: f32, ry: f32, rx: f32) -> bool {
    let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
    dy * dy + dx * dx <= 1.0
}

const OUTFIT: u8 = 3;

/// A standing figure in a coloured outfit in front of a wall and floor.
fn portrait() -> Scene {
    Scene::new(
        |y, x| {
            if inside_ellipse(y, x, 62.0, 128.0, 26.0, 22.0) {
                2 // face
            } else if inside_ellipse(y, x, 48.0, 128.0, 22.0, 26.0) && y < 56.0 {
                4 // hair
            } else if (88.0..200.0).contains(&y) && (x - 128.0).abs() < 30.0 + (y - 88.0) * 0.25 {
                OUTFIT
            } else if (200.0..246.0).contains(&y)
                && ((x - 112.0).abs() < 9.0 || (x - 144.0).abs() < 9.0)
            {
                2 // legs
            } else if y > 210.0 {
                1 // floor
            } else {
                0 // wall
            }
        },
        vec![
            [0.55, 0.70, 0.85],
            [0.45, 0.35, 0.25],
            [0.93, 0.76, 0.62],
            [0.85, 0.15, 0.20],
            [0.25, 0.15, 0.08],
        ],
    )
}

const SKY: u8 = 0;

/// Hills under a sky with a sun.
fn landscape() -> Scene {
    Scene::new(
        |y, x| {
            let hill = 150.0 + 20.0 * (x / 40.0).sin();
            if inside_ellipse(y, x, 60.0, 190.0, 20.0, 20.0) {
                2 // sun
            } else if y < hill {
                SKY
            } else if y < 215.0 {
                1 // grass
            } else {
                3 // path
            }
        },
        vec![
            [0.45, 0.65, 0.95],
            [0.25, 0.60, 0.25],
            [0.98, 0.90, 0.35],
            [0.70, 0.60, 0.45],
        ],
    )
}

const BODY: u8 = 1;

/// A car on a road.
fn street() -> Scene {
    Scene::new(
        |y, x| {
            if inside_ellipse(y, x, 182.0, 80.0, 16.0, 16.0)
                || inside_ellipse(y, x, 182.0, 176.0, 16.0, 16.0)
            {
                2 // wheels
            } else if (110.0..140.0).contains(&y) && (84.0..172.0).contains(&x) {
                if (116.0..136.0).contains(&y) && (94.0..162.0).contains(&x) {
                    4 // windows
                } else {
                    BODY
                }
            } else if (140.0..182.0).contains(&y) && (48.0..208.0).contains(&x) {
                BODY
            } else if y > 170.0 {
                3 // road
            } else {
                0 // buildings
            }
        },
        vec![
            [0.80, 0.78, 0.72],
            [0.90, 0.80, 0.10],
            [0.10, 0.10, 0.10],
            [0.35, 0.35, 0.38],
            [0.60, 0.80, 0.90],
        ],
    )
}

fn write_case(
    dir: &Path,
    scene: &Scene,
    instruction: &str,
    region: u8,
    target: [f32; 3],
) -> Result<()> {
    let dir = ensure_dir(dir)?;
    save_png(&scene.render(), &dir.join("input.png"))?;
    write_atomic(
        &dir.join("instruction.txt"),
        format!("{instruction}\n").as_bytes(),
    )?;
    save_pgm(&mask_to_pgm(&scene.mask(region)), &dir.join("mask.pgm"))?;
    save_png(
        &scene.recoloured(region, target).render(),
        &dir.join("expected.png"),
    )
}

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("assets"));
    ensure_dir(&out)?;
    let person = portrait();
    save_png(&person.render(), &out.join("sample.png"))?;
    save_pgm(
        &mask_to_pgm(&person.mask(OUTFIT)),
        &out.join("sample_mask.pgm"),
    )?;
    let cases = out.join("cases");
    write_case(
        &cases.join("outfit"),
        &person,
        "make her outfit black",
        OUTFIT,
        [0.05, 0.05, 0.05],
    )?;
    write_case(
        &cases.join("sky"),
        &landscape(),
        "make the sky orange",
        SKY,
        [0.95, 0.55, 0.20],
    )?;
    write_case(
        &cases.join("car"),
        &street(),
        "turn the car blue",
        BODY,
        [0.15, 0.30, 0.85],
    )?;
    println!("wrote samples to {}", out.display());
    Ok(())
}
