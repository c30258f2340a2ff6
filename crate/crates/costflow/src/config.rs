//! Run configuration: model hyper-parameters, training/pretraining sections,
//! TOML loading with dotted-path overrides, and validation.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::tensor::DType;

#[derive(thiserror::Error, Debug)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// How raw feature dot products are scaled when building the cost volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostScale {
    /// Divide by sqrt(feature dim); keeps magnitudes attention-friendly.
    Normalized,
    /// Raw dot products; used by oracle tests.
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Rectangular blocks of source pixels share one mask.
    Block,
    /// Every source pixel draws its own mask.
    Random,
}

/// Which side of the reconstruction loss gets standardized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeSide {
    /// Standardize the target crop; compare raw predictions against it.
    Target,
    /// Standardize the prediction instead (alternative variant).
    Prediction,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub img_h: usize,
    pub img_w: usize,
    /// Matching-feature channels per pixel.
    pub feat_dim: usize,
    /// Context-feature channels per pixel.
    pub ctx_dim: usize,
    /// Channels produced by the three-stage cost-map patchify stack.
    pub patch_dim: usize,
    /// Latent tokens summarizing each source pixel's cost map.
    pub codewords: usize,
    /// Channels of each latent token.
    pub latent_dim: usize,
    pub agt_layers: usize,
    pub decoder_iters: usize,
    /// GRU hidden state channels.
    pub hidden_dim: usize,
    /// Side length of local attention windows (source-grid cells).
    pub window: usize,
    pub heads: usize,
    pub cost_scale: CostScale,
    pub precision: Precision,
    /// Reuse decoder cross-attention keys/values across iterations.
    pub kv_cache: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small configuration sized for CPU experiments on 96x96 images.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            img_h: 96,
            img_w: 96,
            feat_dim: 32,
            ctx_dim: 64,
            patch_dim: 16,
            codewords: 4,
            latent_dim: 32,
            agt_layers: 1,
            decoder_iters: 4,
            hidden_dim: 96,
            window: 2,
            heads: 1,
            cost_scale: CostScale::Normalized,
            precision: Precision::F32,
            kv_cache: true,
        }
    }

    /// Full-scale preset matching the published architecture dimensions.
    pub fn paper_scale() -> ModelConfig {
        ModelConfig {
            img_h: 368,
            img_w: 496,
            feat_dim: 256,
            ctx_dim: 256,
            patch_dim: 64,
            codewords: 8,
            latent_dim: 128,
            agt_layers: 3,
            decoder_iters: 12,
            hidden_dim: 128,
            window: 7,
            heads: 8,
            cost_scale: CostScale::Normalized,
            precision: Precision::F32,
            kv_cache: true,
        }
    }

    /// Source/target grid height (1/8 of image height).
    pub fn grid_h(&self) -> usize {
        self.img_h / 8
    }

    pub fn grid_w(&self) -> usize {
        self.img_w / 8
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.img_h % 8 != 0 || self.img_w % 8 != 0 {
            return err(format!(
                "img_h/img_w must be multiples of 8, got {}x{}",
                self.img_h, self.img_w
            ));
        }
        if self.img_h == 0 || self.img_w == 0 {
            return err("image size must be positive".into());
        }
        if self.patch_dim % 4 != 0 || self.patch_dim == 0 {
            return err(format!(
                "patch_dim must be a positive multiple of 4 (three conv stages), got {}",
                self.patch_dim
            ));
        }
        if self.ctx_dim % 2 != 0 || self.ctx_dim == 0 {
            return err(format!(
                "ctx_dim must be positive and even (split into net/inp halves), got {}",
                self.ctx_dim
            ));
        }
        if self.heads == 0 || self.latent_dim % self.heads != 0 {
            return err(format!(
                "heads ({}) must divide latent_dim ({})",
                self.heads, self.latent_dim
            ));
        }
        // agt_layers may be zero: the memory then comes straight from
        // latent summarization.
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("codewords", self.codewords),
            ("latent_dim", self.latent_dim),
            ("decoder_iters", self.decoder_iters),
            ("hidden_dim", self.hidden_dim),
            ("window", self.window),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    /// Per-iteration weight decay of the sequence loss.
    pub gamma: f64,
    pub data_dir: String,
    pub log_csv: Option<String>,
}

impl Default for TrainSection {
    fn default() -> TrainSection {
        TrainSection {
            seed: 0,
            steps: 2000,
            lr: 2e-4,
            warmup_steps: 100,
            clip_norm: 1.0,
            gamma: 0.8,
            data_dir: "data/train".into(),
            log_csv: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    /// Block side-length range in source-grid cells; derived from the grid
    /// when absent.
    pub block_range: Option<[usize; 2]>,
    pub freeze_image_encoder: bool,
    pub freeze_context_encoder: bool,
    pub normalize_side: NormalizeSide,
    pub data_dir: String,
    pub log_csv: Option<String>,
}

impl Default for PretrainSection {
    fn default() -> PretrainSection {
        PretrainSection {
            seed: 0,
            steps: 500,
            lr: 2e-4,
            warmup_steps: 100,
            clip_norm: 1.0,
            mask_ratio: 0.5,
            mask_strategy: MaskStrategy::Block,
            block_range: None,
            freeze_image_encoder: true,
            freeze_context_encoder: true,
            normalize_side: NormalizeSide::Target,
            data_dir: "data/pretrain".into(),
            log_csv: None,
        }
    }
}

impl PretrainSection {
    /// Side-length bounds for mask blocks, in source-grid cells.
    pub fn block_bounds(&self, grid: usize) -> (usize, usize) {
        match self.block_range {
            Some([lo, hi]) => (lo, hi.max(lo)),
            None => {
                let lo = 2.max(grid / 4);
                let hi = 3.max(grid / 2).max(lo);
                (lo, hi)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if let Some([lo, hi]) = self.block_range {
            if lo == 0 || hi < lo {
                return Err(ConfigError::Invalid(format!(
                    "block_range must satisfy 1 <= lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        if !self.freeze_image_encoder {
            return Err(ConfigError::Invalid(
                "pretraining requires freeze_image_encoder = true; \
                 updating the image encoder during masked pretraining diverges"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub pretrain: PretrainSection,
}

impl FileConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        FileConfig::parse(&text, overrides).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<FileConfig> {
        let parse_err = |source: toml::de::Error| ConfigError::Parse {
            path: "<config>".into(),
            source: Box::new(source),
        };
        let mut value: toml::Value = text.parse().map_err(parse_err)?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: FileConfig = value.try_into().map_err(parse_err)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Fully resolved config as TOML, for run logs.
    pub fn resolved(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("<unserializable: {e}>"))
    }
}

/// Applies a `section.key=value` override onto a parsed TOML tree. The value
/// side is parsed as TOML (falling back to a bare string).
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        ConfigError::Invalid(format!("override '{spec}' is not of the form key=value"))
    })?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
        _ => toml::Value::String(raw.trim().to_string()),
    };
    let mut cur = root;
    let parts: Vec<&str> = path.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            ConfigError::Invalid(format!("override path '{path}' crosses a non-table"))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

/// Deterministic mode, toggled by the `COSTFLOW_DETERMINISTIC` environment
/// variable (default on). Kernels are single-threaded either way today; the
/// toggle is logged so runs record which contract they claimed.
pub fn deterministic_mode() -> bool {
    match std::env::var("COSTFLOW_DETERMINISTIC") {
        Ok(v) => !matches!(v.trim(), "0" | "false" | "off"),
        Err(_) => true,
    }
}
