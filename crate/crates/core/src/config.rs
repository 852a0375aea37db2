//! Architectural and optimization hyper-parameters.
//!
//! Every tensor shape in the network is derived from [`ModelConfig`]; the
//! model constructor never looks at data to decide a shape.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder stages (three 2× merges between them).
pub const NUM_STAGES: usize = 4;

/// Channel reduction inside the channel-gating block of each decoder stage.
pub const ASC_REDUCTION: usize = 4;

/// Component switches used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub effn_enabled: bool,
    pub lrd_enabled: bool,
    pub mff_enabled: bool,
    pub asc_enabled: bool,
}

impl Ablation {
    pub const ALL_ON: Ablation = Ablation {
        effn_enabled: true,
        lrd_enabled: true,
        mff_enabled: true,
        asc_enabled: true,
    };

    /// All sixteen flag combinations.
    pub fn all_combinations() -> Vec<Ablation> {
        (0..16u8)
            .map(|bits| Ablation {
                effn_enabled: bits & 1 != 0,
                lrd_enabled: bits & 2 != 0,
                mff_enabled: bits & 4 != 0,
                asc_enabled: bits & 8 != 0,
            })
            .collect()
    }

    /// Short label: `all`, or the disabled components such as `-LRD` or `-LRD-ASC`.
    pub fn label(&self) -> String {
        let names = [
            (self.effn_enabled, "EFFN"),
            (self.lrd_enabled, "LRD"),
            (self.mff_enabled, "MFF"),
            (self.asc_enabled, "ASC"),
        ];
        let off: Vec<_> = names.iter().filter(|(on, _)| !on).map(|(_, n)| *n).collect();
        if off.is_empty() {
            "all".to_string()
        } else {
            format!("-{}", off.join("-"))
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::ALL_ON
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// `(H, W)` in pixels.
    pub img_size: (usize, usize),
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub leaky_slope: f64,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// CPU-sized preset: 64×64 input, patch 2, window 4, C = 32.
    pub fn desk() -> Self {
        Self {
            in_channels: 1,
            num_classes: 3,
            img_size: (64, 64),
            patch_size: 2,
            embed_dim: 32,
            depths: [2, 2, 2, 2],
            num_heads: [2, 4, 8, 16],
            window_size: 4,
            mlp_ratio: 4.0,
            leaky_slope: 0.01,
            ablation: Ablation::ALL_ON,
        }
    }

    /// Full-resolution preset: 512×512 input, patch 4, window 8, C = 96.
    pub fn full_resolution() -> Self {
        let embed_dim = 96;
        Self {
            in_channels: 1,
            num_classes: 3,
            img_size: (512, 512),
            patch_size: 4,
            embed_dim,
            depths: [2, 2, 2, 2],
            num_heads: default_heads(embed_dim),
            window_size: 8,
            mlp_ratio: 4.0,
            leaky_slope: 0.01,
            ablation: Ablation::ALL_ON,
        }
    }

    /// Channel width of encoder stage `s` (`C·2ˢ`).
    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token grid `(H', W')` of encoder stage `s`.
    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        let f = self.patch_size << stage;
        (self.img_size.0 / f, self.img_size.1 / f)
    }

    /// Hidden width of the feed-forward network at channel width `dim`.
    pub fn hidden_dim(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn shift_size(&self) -> usize {
        self.window_size / 2
    }

    pub fn validate(&self) -> ValidationReport {
        validate_config(self)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full_resolution()
    }
}

/// Heads per stage keeping the per-head width at 32.
pub fn default_heads(embed_dim: usize) -> [usize; NUM_STAGES] {
    std::array::from_fn(|s| ((embed_dim << s) / 32).max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub rotate_max_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            rotate_max_deg: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-2,
            lr_final: 6e-6,
            momentum: 0.98,
            weight_decay: 1e-6,
            epochs: 200,
            batch_size: 4,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> ValidationReport {
        let mut v = Vec::new();
        if !(self.lr_final > 0.0 && self.lr_final < self.lr_init) {
            v.push(Violation::new(
                "lr_final",
                format!("need 0 < lr_final < lr_init, got lr_final={} lr_init={}", self.lr_final, self.lr_init),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(Violation::new("momentum", format!("need 0 <= momentum < 1, got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(Violation::new("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            v.push(Violation::new("hflip_prob", format!("must lie in [0, 1], got {}", self.augment.hflip_prob)));
        }
        if !(self.augment.rotate_max_deg >= 0.0) {
            v.push(Violation::new(
                "rotate_max_deg",
                format!("must be >= 0, got {}", self.augment.rotate_max_deg),
            ));
        }
        if self.epochs == 0 {
            v.push(Violation::new("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            v.push(Violation::new("batch_size", "must be >= 1"));
        }
        ValidationReport { violations: v }
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl Violation {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Config(
                self.violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            ))
        }
    }
}

/// Checks every shape invariant of the model configuration.
pub fn validate_config(cfg: &ModelConfig) -> ValidationReport {
    let mut v = Vec::new();
    let positive = [
        ("in_channels", cfg.in_channels),
        ("num_classes", cfg.num_classes),
        ("patch_size", cfg.patch_size),
        ("embed_dim", cfg.embed_dim),
        ("window_size", cfg.window_size),
    ];
    for (name, value) in positive {
        if value == 0 {
            v.push(Violation::new(name, "must be >= 1"));
        }
    }
    if !v.is_empty() {
        return ValidationReport { violations: v };
    }

    let (h, w) = cfg.img_size;
    let unit = cfg.patch_size << (NUM_STAGES - 1);
    if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
        v.push(Violation::new(
            "img_size",
            format!("{h}x{w} must be divisible by patch_size*8 = {unit}"),
        ));
    }
    if !cfg.patch_size.is_power_of_two() {
        v.push(Violation::new(
            "patch_size",
            format!("{} must be a power of two for the output expansion", cfg.patch_size),
        ));
    }
    if h % unit == 0 && w % unit == 0 {
        for s in 0..NUM_STAGES {
            let (gh, gw) = cfg.stage_grid(s);
            if gh % cfg.window_size != 0 || gw % cfg.window_size != 0 {
                v.push(Violation::new(
                    "window_size",
                    format!("stage {s} grid {gh}x{gw} is not divisible by window_size {}", cfg.window_size),
                ));
            }
        }
    }
    for s in 0..NUM_STAGES {
        let dim = cfg.stage_dim(s);
        let heads = cfg.num_heads[s];
        if heads == 0 || dim % heads != 0 {
            v.push(Violation::new(
                "num_heads",
                format!("stage {s} dim {dim} is not divisible by num_heads {heads}"),
            ));
        }
        if cfg.depths[s] % 2 != 0 {
            v.push(Violation::new(
                "depths",
                format!("depths must be even, stage {s} has {}", cfg.depths[s]),
            ));
        }
    }
    if cfg.embed_dim % ASC_REDUCTION != 0 {
        v.push(Violation::new(
            "embed_dim",
            format!("{} must be divisible by the channel-gate reduction {ASC_REDUCTION}", cfg.embed_dim),
        ));
    }
    if !(cfg.mlp_ratio > 0.0) || cfg.hidden_dim(cfg.embed_dim) == 0 {
        v.push(Violation::new("mlp_ratio", format!("must be positive, got {}", cfg.mlp_ratio)));
    }
    if !(cfg.leaky_slope > 0.0 && cfg.leaky_slope < 1.0) {
        v.push(Violation::new("leaky_slope", format!("must lie in (0, 1), got {}", cfg.leaky_slope)));
    }
    ValidationReport { violations: v }
}

/// Model and training configuration as stored in one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default = "config_format_version")]
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const CONFIG_FORMAT_VERSION: u32 = 1;

fn config_format_version() -> u32 {
    CONFIG_FORMAT_VERSION
}

fn parse_error(path: &Path, err: serde_json::Error) -> Error {
    let msg = err.to_string();
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            return Error::MissingField {
                field: rest[..end].to_string(),
            };
        }
    }
    Error::Parse {
        path: path.to_path_buf(),
        msg,
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: impl AsRef<Path>) -> Result<(ModelConfig, TrainConfig)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ConfigFile = serde_json::from_str(&text).map_err(|e| parse_error(path, e))?;
    if file.format_version != CONFIG_FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported config format_version {}", file.format_version)));
    }
    validate_config(&file.model).into_result()?;
    file.train.validate().into_result()?;
    Ok((file.model, file.train))
}

pub fn save_config(path: impl AsRef<Path>, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    let path = path.as_ref();
    let file = ConfigFile {
        format_version: CONFIG_FORMAT_VERSION,
        model: model.clone(),
        train: train.clone(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
