//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored, keys may appear once, and unknown
//! keys are rejected. [`Config::to_text`] writes every key with its resolved
//! value; that echo is what run artifacts are hashed against.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scene::{DomainStyle, SceneGenConfig};

/// Splits config text into `(line number, key, value)` triples.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') {
            return Err(Error::Config(format!("line {line_no}: invalid key {key:?}")));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("line {line_no}: empty value for {key}")));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line_no}: duplicate key {key}")));
        }
        out.push((line_no, key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Which pixels of the pasted source region are aligned to class prototypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelSelect {
    /// Only pixels hit by projected target points.
    Projection,
    /// As many uniformly drawn source-region pixels as there are projected points in it.
    Random,
    /// Every pixel of the source region.
    All,
}

/// Which parts of the mixed-image distillation are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcdVariant {
    /// Mixed images; source pixels to prototypes, target pixels to point predictions.
    Full,
    /// Mixed images; only target pixels are constrained.
    MixOnly,
    /// Unmixed source images; every sampled pixel aligned to prototypes.
    PrototypeOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Region,
    Class,
}

macro_rules! keyword_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown value {other:?}, expected one of {}",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl $ty {
            pub fn keyword(&self) -> &'static str {
                $(if *self == $variant { return $name; })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(PixelSelect { "projection" => PixelSelect::Projection, "random" => PixelSelect::Random, "all" => PixelSelect::All });
keyword_enum!(IcdVariant { "full" => IcdVariant::Full, "mix-only" => IcdVariant::MixOnly, "prototype-only" => IcdVariant::PrototypeOnly });
keyword_enum!(MaskKind { "region" => MaskKind::Region, "class" => MaskKind::Class });

/// Component switches for ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub use_hybrid_pl: bool,
    pub use_icd: bool,
    pub use_icg: bool,
    pub use_teacher_labels: bool,
    pub use_2d_labels_in_icg: bool,
    pub icd_pixel_select: PixelSelect,
    pub icd_variant: IcdVariant,
    pub mask_kind: MaskKind,
    pub pl_round: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_hybrid_pl: true,
            use_icd: true,
            use_icg: true,
            use_teacher_labels: true,
            use_2d_labels_in_icg: true,
            icd_pixel_select: PixelSelect::Projection,
            icd_variant: IcdVariant::Full,
            mask_kind: MaskKind::Region,
            pl_round: false,
        }
    }
}

/// Hyperparameters of pretraining and joint training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub pretrain_iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub lambda_2d_t: f64,
    pub lambda_2d_m: f64,
    pub lambda_3d_m: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub hidden_2d: usize,
    pub hidden_3d: usize,
    /// Source pixels drawn per image per step for the supervised 2D loss; 0 uses all.
    pub source_pixels: usize,
    pub area_range: (f64, f64),
    /// EMA smoothing of class prototypes across iterations; 0 recomputes per batch.
    pub prototype_momentum: f64,
    pub pl_weight: f64,
    pub qualitative_scenes: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            pretrain_iterations: 1000,
            batch_size: 4,
            base_lr: 0.001,
            poly_power: 0.9,
            lambda_2d_t: 0.1,
            lambda_2d_m: 0.1,
            lambda_3d_m: 1.0,
            ema_decay: 0.99,
            seed: 0,
            hidden_2d: 64,
            hidden_3d: 64,
            source_pixels: 1024,
            area_range: (0.2, 0.5),
            prototype_momentum: 0.0,
            pl_weight: 1.0,
            qualitative_scenes: 4,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return err("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if self.ablation.use_icg && self.batch_size < 2 {
            return err(format!("use_icg pairs scenes within a batch and needs batch_size >= 2, got {}", self.batch_size));
        }
        for (name, v) in [
            ("lambda_2d_t", self.lambda_2d_t),
            ("lambda_2d_m", self.lambda_2d_m),
            ("lambda_3d_m", self.lambda_3d_m),
            ("pl_weight", self.pl_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be a finite non-negative weight, got {v}"));
            }
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return err(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.poly_power >= 0.0) {
            return err("base_lr must be positive and poly_power non-negative".into());
        }
        let (lo, hi) = self.area_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return err(format!("area_range must satisfy 0 < lo <= hi < 1, got {lo},{hi}"));
        }
        if !(0.0..1.0).contains(&self.prototype_momentum) {
            return err("prototype_momentum must lie in [0, 1)".into());
        }
        if self.hidden_2d == 0 || self.hidden_3d == 0 {
            return err("hidden sizes must be positive".into());
        }
        if self.ablation.use_icg && !self.ablation.use_teacher_labels && !self.ablation.use_2d_labels_in_icg {
            return err("use_icg needs at least one of use_teacher_labels, use_2d_labels_in_icg".into());
        }
        Ok(())
    }
}

/// The whole configuration file: benchmark generation plus training.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub scene: SceneGenConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

/// Parses `lo,hi`.
pub fn parse_area_range(value: &str) -> Result<(f64, f64)> {
    let (lo, hi) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("area range {value:?} must be `lo,hi`")))?;
    Ok((parse("area_range", lo.trim())?, parse("area_range", hi.trim())?))
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Config::default();
        for (line, key, value) in parse_key_values(text)? {
            config
                .set(&key, &value)
                .map_err(|e| Error::Config(format!("line {line}: {}", e.to_string().trim_start_matches("configuration error: "))))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.scene;
        let t = &mut self.train;
        let a = &mut t.ablation;
        match key {
            "num_classes" => s.num_classes = parse(key, value)?,
            "height" => s.height = parse(key, value)?,
            "width" => s.width = parse(key, value)?,
            "focal" => s.focal = parse(key, value)?,
            "n_rays" => s.n_rays = parse(key, value)?,
            "source_train" => s.source_train = parse(key, value)?,
            "source_val" => s.source_val = parse(key, value)?,
            "target_train" => s.target_train = parse(key, value)?,
            "target_val" => s.target_val = parse(key, value)?,
            "data_seed" => s.seed = parse(key, value)?,
            "camera_height" => s.camera_height = parse(key, value)?,
            "objects_per_class" => s.objects_per_class = parse(key, value)?,
            "source_hue" => s.source_style.hue_degrees = parse(key, value)?,
            "source_brightness" => s.source_style.brightness = parse(key, value)?,
            "source_noise" => s.source_style.noise = parse(key, value)?,
            "target_hue" => s.target_style.hue_degrees = parse(key, value)?,
            "target_brightness" => s.target_style.brightness = parse(key, value)?,
            "target_noise" => s.target_style.noise = parse(key, value)?,
            "iterations" => t.iterations = parse(key, value)?,
            "pretrain_iterations" => t.pretrain_iterations = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "poly_power" => t.poly_power = parse(key, value)?,
            "lambda_2d_t" => t.lambda_2d_t = parse(key, value)?,
            "lambda_2d_m" => t.lambda_2d_m = parse(key, value)?,
            "lambda_3d_m" => t.lambda_3d_m = parse(key, value)?,
            "ema_decay" => t.ema_decay = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "hidden_2d" => t.hidden_2d = parse(key, value)?,
            "hidden_3d" => t.hidden_3d = parse(key, value)?,
            "source_pixels" => t.source_pixels = parse(key, value)?,
            "area_range" => t.area_range = parse_area_range(value)?,
            "prototype_momentum" => t.prototype_momentum = parse(key, value)?,
            "pl_weight" => t.pl_weight = parse(key, value)?,
            "qualitative_scenes" => t.qualitative_scenes = parse(key, value)?,
            "use_hybrid_pl" => a.use_hybrid_pl = parse_bool(key, value)?,
            "use_icd" => a.use_icd = parse_bool(key, value)?,
            "use_icg" => a.use_icg = parse_bool(key, value)?,
            "use_teacher_labels" => a.use_teacher_labels = parse_bool(key, value)?,
            "use_2d_labels_in_icg" => a.use_2d_labels_in_icg = parse_bool(key, value)?,
            "icd_pixel_select" => a.icd_pixel_select = value.parse()?,
            "icd_variant" => a.icd_variant = value.parse()?,
            "mask_kind" => a.mask_kind = value.parse()?,
            "pl_round" => a.pl_round = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let t = &self.train;
        let a = &t.ablation;
        let mut out = String::from("# resolved configuration\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("num_classes", s.num_classes.to_string());
        put("height", s.height.to_string());
        put("width", s.width.to_string());
        put("focal", s.focal.to_string());
        put("n_rays", s.n_rays.to_string());
        put("source_train", s.source_train.to_string());
        put("source_val", s.source_val.to_string());
        put("target_train", s.target_train.to_string());
        put("target_val", s.target_val.to_string());
        put("data_seed", s.seed.to_string());
        put("camera_height", s.camera_height.to_string());
        put("objects_per_class", s.objects_per_class.to_string());
        let styles: [(&str, &DomainStyle); 2] = [("source", &s.source_style), ("target", &s.target_style)];
        for (name, style) in styles {
            put(&format!("{name}_hue"), style.hue_degrees.to_string());
            put(&format!("{name}_brightness"), style.brightness.to_string());
            put(&format!("{name}_noise"), style.noise.to_string());
        }
        put("iterations", t.iterations.to_string());
        put("pretrain_iterations", t.pretrain_iterations.to_string());
        put("batch_size", t.batch_size.to_string());
        put("base_lr", t.base_lr.to_string());
        put("poly_power", t.poly_power.to_string());
        put("lambda_2d_t", t.lambda_2d_t.to_string());
        put("lambda_2d_m", t.lambda_2d_m.to_string());
        put("lambda_3d_m", t.lambda_3d_m.to_string());
        put("ema_decay", t.ema_decay.to_string());
        put("seed", t.seed.to_string());
        put("hidden_2d", t.hidden_2d.to_string());
        put("hidden_3d", t.hidden_3d.to_string());
        put("source_pixels", t.source_pixels.to_string());
        put("area_range", format!("{},{}", t.area_range.0, t.area_range.1));
        put("prototype_momentum", t.prototype_momentum.to_string());
        put("pl_weight", t.pl_weight.to_string());
        put("qualitative_scenes", t.qualitative_scenes.to_string());
        put("use_hybrid_pl", a.use_hybrid_pl.to_string());
        put("use_icd", a.use_icd.to_string());
        put("use_icg", a.use_icg.to_string());
        put("use_teacher_labels", a.use_teacher_labels.to_string());
        put("use_2d_labels_in_icg", a.use_2d_labels_in_icg.to_string());
        put("icd_pixel_select", a.icd_pixel_select.keyword().to_string());
        put("icd_variant", a.icd_variant.keyword().to_string());
        put("mask_kind", a.mask_kind.keyword().to_string());
        put("pl_round", a.pl_round.to_string());
        out
    }

    /// Short digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }
}
