//! Pipeline configuration and its flat `key = value` document format.
//!
//! Layers, lowest precedence first: built-in defaults, the `LIME_SEED`
//! environment variable, a config file, command-line overrides. Step windows
//! that are never set explicitly follow `total_steps`: the defaults are stated
//! for 100 steps and rescaled proportionally for other step counts.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::denoiser::StepWindow;
use crate::error::{Error, Result};

pub const SEED_ENV: &str = "LIME_SEED";

const REFERENCE_STEPS: usize = 100;
const DEFAULT_FEATURE_WINDOW: (usize, usize) = (30, 50);
const DEFAULT_ATTN_WINDOW: (usize, usize) = (1, 75);
const DEFAULT_REG_WINDOW: (usize, usize) = (1, 75);
const MAX_POINTS: usize = 64 * 64;
const MAX_CLUSTERS: usize = 256 * 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clustering {
    Kmeans,
    Agglomerative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditMode {
    /// Suppress unrelated tokens inside the RoI.
    AttentionReg,
    /// Promote related tokens inside the RoI.
    TokenReward,
    /// Blend the edit trajectory with an instruction-free one in latent space.
    NoiseBlend,
    /// Plain guided edit, no localization applied.
    None,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        s,
                        [$($name),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(Clustering, "clustering mode",
    Clustering::Kmeans => "kmeans",
    Clustering::Agglomerative => "agglomerative",
);

keyword_enum!(EditMode, "edit mode",
    EditMode::AttentionReg => "attention_reg",
    EditMode::TokenReward => "token_reward",
    EditMode::NoiseBlend => "noise_blend",
    EditMode::None => "none",
);

/// Fully resolved and validated pipeline configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig {
    /// Seeds the initial noise and the clustering.
    pub seed: u64,
    /// Seeds the denoiser weights.
    pub model_seed: u64,
    pub total_steps: usize,
    pub feature_window: StepWindow,
    pub attn_window: StepWindow,
    pub reg_window: StepWindow,
    pub k_clusters: usize,
    pub n_points: usize,
    pub s_i_loc: f64,
    pub s_t_loc: f64,
    pub s_i_edit: f64,
    pub s_t_edit: f64,
    pub clustering: Clustering,
    pub agglo_threshold: f64,
    pub edit_mode: EditMode,
    pub external_mask: Option<PathBuf>,
}

impl Default for EditConfig {
    fn default() -> Self {
        ConfigLayer::default()
            .resolve()
            .expect("built-in defaults are valid")
    }
}

impl EditConfig {
    /// Render as a config document that parses back to `self`.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        for (key, value) in self.entries() {
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("feature_window", self.feature_window.to_string()),
            ("attn_window", self.attn_window.to_string()),
            ("reg_window", self.reg_window.to_string()),
            ("k_clusters", self.k_clusters.to_string()),
            ("n_points", self.n_points.to_string()),
            ("s_i_loc", self.s_i_loc.to_string()),
            ("s_t_loc", self.s_t_loc.to_string()),
            ("s_i_edit", self.s_i_edit.to_string()),
            ("s_t_edit", self.s_t_edit.to_string()),
            ("clustering", self.clustering.to_string()),
            ("agglo_threshold", self.agglo_threshold.to_string()),
            ("edit_mode", self.edit_mode.to_string()),
        ];
        if let Some(p) = &self.external_mask {
            out.push(("external_mask", p.display().to_string()));
        }
        out
    }

    /// Parse a standalone document over the built-in defaults.
    pub fn from_document(text: &str) -> Result<Self> {
        let mut layer = ConfigLayer::default();
        layer.apply_document(text)?;
        layer.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 2 {
            return Err(Error::config("total_steps", "must be at least 2"));
        }
        for (key, w) in [
            ("feature_window", self.feature_window),
            ("attn_window", self.attn_window),
            ("reg_window", self.reg_window),
        ] {
            if w.hi > self.total_steps {
                return Err(Error::config(
                    key,
                    format!("window {w} exceeds total_steps {}", self.total_steps),
                ));
            }
        }
        if !(1..=MAX_CLUSTERS).contains(&self.k_clusters) {
            return Err(Error::config(
                "k_clusters",
                format!("must be in 1..={MAX_CLUSTERS}"),
            ));
        }
        if !(1..=MAX_POINTS).contains(&self.n_points) {
            return Err(Error::config(
                "n_points",
                format!("must be in 1..={MAX_POINTS}"),
            ));
        }
        for (key, v) in [
            ("s_i_loc", self.s_i_loc),
            ("s_t_loc", self.s_t_loc),
            ("s_i_edit", self.s_i_edit),
            ("s_t_edit", self.s_t_edit),
        ] {
            if !v.is_finite() {
                return Err(Error::config(key, "must be finite"));
            }
        }
        if !(self.agglo_threshold > 0.0 && self.agglo_threshold < 1.0) {
            return Err(Error::config(
                "agglo_threshold",
                "must lie strictly between 0 and 1",
            ));
        }
        Ok(())
    }
}

/// A partial configuration. Later layers override earlier ones field by field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigLayer {
    pub seed: Option<u64>,
    pub model_seed: Option<u64>,
    pub total_steps: Option<usize>,
    pub feature_window: Option<StepWindow>,
    pub attn_window: Option<StepWindow>,
    pub reg_window: Option<StepWindow>,
    pub k_clusters: Option<usize>,
    pub n_points: Option<usize>,
    pub s_i_loc: Option<f64>,
    pub s_t_loc: Option<f64>,
    pub s_i_edit: Option<f64>,
    pub s_t_edit: Option<f64>,
    pub clustering: Option<Clustering>,
    pub agglo_threshold: Option<f64>,
    pub edit_mode: Option<EditMode>,
    pub external_mask: Option<PathBuf>,
}

pub const KEYS: [&str; 16] = [
    "seed",
    "model_seed",
    "total_steps",
    "feature_window",
    "attn_window",
    "reg_window",
    "k_clusters",
    "n_points",
    "s_i_loc",
    "s_t_loc",
    "s_i_edit",
    "s_t_edit",
    "clustering",
    "agglo_threshold",
    "edit_mode",
    "external_mask",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_window(key: &str, value: &str) -> Result<StepWindow> {
    let (lo, hi) = value
        .split_once(',')
        .ok_or_else(|| Error::config(key, format!("expected `lo,hi`, got `{value}`")))?;
    let lo = parse_value(key, lo.trim())?;
    let hi = parse_value(key, hi.trim())?;
    StepWindow::new(lo, hi).map_err(|_| {
        Error::config(
            key,
            format!("window [{lo}, {hi}] must satisfy 1 <= lo <= hi"),
        )
    })
}

impl ConfigLayer {
    /// Set one key from its textual value. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = Some(parse_value(key, value)?),
            "model_seed" => self.model_seed = Some(parse_value(key, value)?),
            "total_steps" => self.total_steps = Some(parse_value(key, value)?),
            "feature_window" => self.feature_window = Some(parse_window(key, value)?),
            "attn_window" => self.attn_window = Some(parse_window(key, value)?),
            "reg_window" => self.reg_window = Some(parse_window(key, value)?),
            "k_clusters" => self.k_clusters = Some(parse_value(key, value)?),
            "n_points" => self.n_points = Some(parse_value(key, value)?),
            "s_i_loc" => self.s_i_loc = Some(parse_value(key, value)?),
            "s_t_loc" => self.s_t_loc = Some(parse_value(key, value)?),
            "s_i_edit" => self.s_i_edit = Some(parse_value(key, value)?),
            "s_t_edit" => self.s_t_edit = Some(parse_value(key, value)?),
            "clustering" => self.clustering = Some(parse_value(key, value)?),
            "agglo_threshold" => self.agglo_threshold = Some(parse_value(key, value)?),
            "edit_mode" => self.edit_mode = Some(parse_value(key, value)?),
            "external_mask" => {
                if value.is_empty() {
                    return Err(Error::config(key, "empty path"));
                }
                self.external_mask = Some(PathBuf::from(value));
            }
            _ => {
                return Err(Error::config(
                    key,
                    format!("unknown key (known keys: {})", KEYS.join(", ")),
                ))
            }
        }
        Ok(())
    }

    /// Apply a `key = value` document. Blank lines and lines starting with `#`
    /// are skipped; a key may appear at most once per document.
    pub fn apply_document(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::config(key, "set more than once"));
            }
            seen.push(key);
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_document(&text)
    }

    /// Apply the seed override from the environment value, if any.
    pub fn apply_env_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = Some(parse_value(SEED_ENV, v.trim())?);
        }
        Ok(())
    }

    /// Overlay `other` on top of `self`.
    pub fn merge(&mut self, other: ConfigLayer) {
        macro_rules! take {
            ($($f:ident),+) => { $( if other.$f.is_some() { self.$f = other.$f; } )+ };
        }
        take!(
            seed,
            model_seed,
            total_steps,
            feature_window,
            attn_window,
            reg_window,
            k_clusters,
            n_points,
            s_i_loc,
            s_t_loc,
            s_i_edit,
            s_t_edit,
            clustering,
            agglo_threshold,
            edit_mode,
            external_mask
        );
    }

    /// Fill in defaults and validate.
    pub fn resolve(&self) -> Result<EditConfig> {
        let total_steps = self.total_steps.unwrap_or(REFERENCE_STEPS);
        if total_steps == 0 {
            return Err(Error::config("total_steps", "must be positive"));
        }
        let cfg = EditConfig {
            seed: self.seed.unwrap_or(0),
            model_seed: self.model_seed.unwrap_or(42),
            total_steps,
            feature_window: self
                .feature_window
                .unwrap_or_else(|| scaled_window(DEFAULT_FEATURE_WINDOW, total_steps)),
            attn_window: self
                .attn_window
                .unwrap_or_else(|| scaled_window(DEFAULT_ATTN_WINDOW, total_steps)),
            reg_window: self
                .reg_window
                .unwrap_or_else(|| scaled_window(DEFAULT_REG_WINDOW, total_steps)),
            k_clusters: self.k_clusters.unwrap_or(8),
            n_points: self.n_points.unwrap_or(100),
            s_i_loc: self.s_i_loc.unwrap_or(1.5),
            s_t_loc: self.s_t_loc.unwrap_or(7.5),
            s_i_edit: self.s_i_edit.unwrap_or(1.5),
            s_t_edit: self.s_t_edit.unwrap_or(3.5),
            clustering: self.clustering.unwrap_or(Clustering::Kmeans),
            agglo_threshold: self.agglo_threshold.unwrap_or(0.5),
            edit_mode: self.edit_mode.unwrap_or(EditMode::AttentionReg),
            external_mask: self.external_mask.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Map a window stated for 100 steps onto `total` steps, rounding half up and
/// keeping `1 <= lo <= hi <= total`.
pub fn scaled_window((lo, hi): (usize, usize), total: usize) -> StepWindow {
    let scale = |s: usize| (2 * s * total + REFERENCE_STEPS) / (2 * REFERENCE_STEPS);
    let lo = scale(lo).clamp(1, total.max(1));
    let hi = scale(hi).clamp(lo, total.max(1));
    StepWindow { lo, hi }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = EditConfig::from_document("").unwrap();
        assert_eq!(c.total_steps, 100);
        assert_eq!(c.feature_window, StepWindow { lo: 30, hi: 50 });
        assert_eq!(c.attn_window, StepWindow { lo: 1, hi: 75 });
        assert_eq!(c.reg_window, StepWindow { lo: 1, hi: 75 });
        assert_eq!((c.k_clusters, c.n_points), (8, 100));
        assert_eq!((c.s_i_loc, c.s_t_loc), (1.5, 7.5));
        assert_eq!((c.s_i_edit, c.s_t_edit), (1.5, 3.5));
        assert_eq!(c.clustering, Clustering::Kmeans);
        assert_eq!(c.agglo_threshold, 0.5);
        assert_eq!(c.edit_mode, EditMode::AttentionReg);
        assert_eq!(c, EditConfig::default());
    }

    #[test]
    fn file_sets_cluster_count() {
        let c = EditConfig::from_document("# ablation row\nk_clusters = 16\n").unwrap();
        assert_eq!(c.k_clusters, 16);
    }

    #[test]
    fn validation_names_the_key() {
        for (doc, key) in [
            ("total_steps = 0", "total_steps"),
            ("total_steps = 1", "total_steps"),
            ("n_points = 0", "n_points"),
            ("n_points = 5000", "n_points"),
            ("k_clusters = 0", "k_clusters"),
            ("agglo_threshold = 1", "agglo_threshold"),
            ("s_t_edit = inf", "s_t_edit"),
            ("s_i_loc = NaN", "s_i_loc"),
            ("feature_window = 0,3", "feature_window"),
            ("attn_window = 5,3", "attn_window"),
            ("reg_window = 1,80\ntotal_steps = 50", "reg_window"),
            ("clustering = spectral", "clustering"),
            ("bogus = 1", "bogus"),
            ("seed = 1\nseed = 2", "seed"),
        ] {
            match EditConfig::from_document(doc) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{doc}"),
                other => panic!("{doc}: {other:?}"),
            }
        }
        assert!(EditConfig::from_document("no equals sign").is_err());
    }

    #[test]
    fn windows_follow_step_count_unless_set() {
        let c = EditConfig::from_document("total_steps = 20").unwrap();
        assert_eq!(c.feature_window, StepWindow { lo: 6, hi: 10 });
        assert_eq!(c.attn_window, StepWindow { lo: 1, hi: 15 });
        let c = EditConfig::from_document("total_steps = 10").unwrap();
        assert_eq!(c.feature_window, StepWindow { lo: 3, hi: 5 });
        assert_eq!(c.attn_window, StepWindow { lo: 1, hi: 8 });
        let c = EditConfig::from_document("total_steps = 10\nattn_window = 2,4").unwrap();
        assert_eq!(c.attn_window, StepWindow { lo: 2, hi: 4 });
        for total in 2..=300 {
            for w in [DEFAULT_FEATURE_WINDOW, DEFAULT_ATTN_WINDOW] {
                let s = scaled_window(w, total);
                assert!(1 <= s.lo && s.lo <= s.hi && s.hi <= total, "{total}: {s}");
            }
        }
    }

    #[test]
    fn precedence() {
        let mut layer = ConfigLayer::default();
        layer.apply_env_seed(Some("7")).unwrap();
        assert_eq!(layer.resolve().unwrap().seed, 7);
        layer.apply_document("seed = 9\nn_points = 25").unwrap();
        let mut cli = ConfigLayer::default();
        cli.set("n_points", "400").unwrap();
        layer.merge(cli);
        let c = layer.resolve().unwrap();
        assert_eq!((c.seed, c.n_points), (9, 400));
        assert!(ConfigLayer::default().apply_env_seed(Some("x")).is_err());
    }

    #[test]
    fn document_roundtrip_with_mask() {
        let c = EditConfig {
            external_mask: Some(PathBuf::from("masks/gt mask.pgm")),
            edit_mode: EditMode::NoiseBlend,
            ..Default::default()
        };
        assert_eq!(EditConfig::from_document(&c.to_document()).unwrap(), c);
    }

    fn arb_config() -> impl Strategy<Value = EditConfig> {
        (
            (any::<u64>(), any::<u64>(), 2usize..400),
            (1usize..=256, 1usize..=4096),
            prop::array::uniform4(-50.0f64..50.0),
            (any::<bool>(), 0.001f64..0.999, 0usize..4),
            prop::array::uniform6(0.0f64..1.0),
        )
            .prop_map(
                |((seed, model_seed, total), (k, n), s, (agg, th, mode), w)| {
                    let window = |a: f64, b: f64| {
                        let lo = 1 + (a * (total - 1) as f64) as usize;
                        let hi = lo + (b * (total - lo) as f64) as usize;
                        StepWindow { lo, hi }
                    };
                    EditConfig {
                        seed,
                        model_seed,
                        total_steps: total,
                        feature_window: window(w[0], w[1]),
                        attn_window: window(w[2], w[3]),
                        reg_window: window(w[4], w[5]),
                        k_clusters: k,
                        n_points: n,
                        s_i_loc: s[0],
                        s_t_loc: s[1],
                        s_i_edit: s[2],
                        s_t_edit: s[3],
                        clustering: if agg {
                            Clustering::Agglomerative
                        } else {
                            Clustering::Kmeans
                        },
                        agglo_threshold: th,
                        edit_mode: [
                            EditMode::AttentionReg,
                            EditMode::TokenReward,
                            EditMode::NoiseBlend,
                            EditMode::None,
                        ][mode],
                        external_mask: None,
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(c in arb_config()) {
            let doc = c.to_document();
            let parsed = EditConfig::from_document(&doc).unwrap();
            prop_assert_eq!(&parsed, &c);
            prop_assert_eq!(parsed.to_document(), doc);
        }
    }
}
