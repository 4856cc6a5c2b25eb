//! Run configuration. Files are TOML with a schema version; unknown keys are
//! rejected and cross-field constraints are checked on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthSpec;
use crate::error::{FptError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size_high: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Side length of the positional grid the weights were trained at.
    pub pretrain_grid: usize,
    /// Seed for the randomly initialized stand-in weights.
    pub seed: u64,
    /// Externally supplied weights (FPTW file); overrides `seed` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.image_size_high / self.patch_size
    }

    /// Token count including CLS.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FptError::Config(m));
        if self.patch_size == 0 || self.image_size_high == 0 || self.image_size_high % self.patch_size != 0 {
            return bad(format!(
                "backbone image size {} is not divisible by patch size {}",
                self.image_size_high, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("backbone dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.layers == 0 || self.mlp_ratio == 0 || self.pretrain_grid == 0 {
            return bad("backbone layers, mlp_ratio and pretrain_grid must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideConfig {
    pub image_size_low: usize,
    pub reduction_factor: usize,
    pub num_prompts: usize,
    /// Defaults to `max(1, backbone heads / 2)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// One prompt set reused by every layer instead of one per layer.
    #[serde(default)]
    pub shared_prompts: bool,
    pub mlp_ratio: usize,
    /// Dropout after attention and MLP in side blocks; 0 disables it.
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScope {
    /// Each layer ranks tokens by its own attention map.
    PerLayer,
    /// One layer's map picks the tokens used by every layer.
    Global { layer: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub ratio: f64,
    pub keep_cls: bool,
    pub scope: SelectionScope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory dataset `<root>/<split>/<class>/<id>.png`; synthetic when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Fpt,
    SideOnly,
    FptNoSelection,
    FptSymmetric,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Fpt,
        TrainMode::SideOnly,
        TrainMode::FptNoSelection,
        TrainMode::FptSymmetric,
    ];

    pub fn uses_backbone(self) -> bool {
        !matches!(self, TrainMode::SideOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Fpt => "fpt",
            TrainMode::SideOnly => "side_only",
            TrainMode::FptNoSelection => "fpt_no_selection",
            TrainMode::FptSymmetric => "fpt_symmetric",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = FptError;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FptError::Config(format!("unknown mode {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FptConfig {
    pub schema_version: u32,
    pub backbone: BackboneConfig,
    pub side: SideConfig,
    pub selection: SelectionConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for FptConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FptConfig {
    /// CPU-sized defaults: 128 px to the backbone, 32 px to the side network.
    pub fn desk() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            backbone: BackboneConfig {
                image_size_high: 128,
                patch_size: 8,
                dim: 64,
                layers: 4,
                heads: 4,
                mlp_ratio: 4,
                pretrain_grid: 8,
                seed: 0x5eed,
                weights: None,
            },
            side: SideConfig {
                image_size_low: 32,
                reduction_factor: 8,
                num_prompts: 16,
                heads: None,
                shared_prompts: false,
                mlp_ratio: 4,
                dropout: 0.0,
            },
            selection: SelectionConfig {
                ratio: 0.2,
                keep_cls: true,
                scope: SelectionScope::PerLayer,
            },
            data: DataConfig {
                root: None,
                synth: SynthSpec::default(),
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 16,
                lr: 5e-3,
                weight_decay: 0.01,
                seed: 0,
                mode: TrainMode::Fpt,
            },
        }
    }

    /// ViT-B/16 shape at 512 px with a 224 px side input.
    pub fn vit_b() -> Self {
        let mut c = Self::desk();
        c.backbone = BackboneConfig {
            image_size_high: 512,
            patch_size: 16,
            dim: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            pretrain_grid: 14,
            seed: 0x5eed,
            weights: None,
        };
        c.side.image_size_low = 224;
        c.data.synth.canvas = 512;
        c
    }

    pub fn side_dim(&self) -> usize {
        self.backbone.dim / self.side.reduction_factor
    }

    pub fn side_heads(&self) -> usize {
        self.side.heads.unwrap_or((self.backbone.heads / 2).max(1))
    }

    /// Selection ratio actually used by `mode`.
    pub fn effective_ratio(&self, mode: TrainMode) -> f64 {
        match mode {
            TrainMode::FptNoSelection => 1.0,
            _ => self.selection.ratio,
        }
    }

    /// Side-network input resolution under `mode`.
    pub fn side_resolution(&self, mode: TrainMode) -> usize {
        match mode {
            TrainMode::FptSymmetric => self.backbone.image_size_high,
            _ => self.side.image_size_low,
        }
    }

    /// This config with `mode`'s selection ratio folded in.
    pub fn for_mode(&self, mode: TrainMode) -> Self {
        let mut c = self.clone();
        c.train.mode = mode;
        c.selection.ratio = self.effective_ratio(mode);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FptError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.backbone.validate()?;
        let s = &self.side;
        if s.reduction_factor == 0 || self.backbone.dim % s.reduction_factor != 0 {
            return bad(format!(
                "backbone dim {} not divisible by reduction factor {}",
                self.backbone.dim, s.reduction_factor
            ));
        }
        let d_s = self.side_dim();
        let h_s = self.side_heads();
        if d_s < 2 || h_s == 0 || d_s % h_s != 0 {
            return bad(format!("side dim {d_s} not divisible by side heads {h_s}"));
        }
        if s.image_size_low == 0 || s.image_size_low % self.backbone.patch_size != 0 {
            return bad(format!(
                "side image size {} is not divisible by patch size {}",
                s.image_size_low, self.backbone.patch_size
            ));
        }
        if s.mlp_ratio == 0 {
            return bad("side mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&s.dropout) {
            return bad(format!("dropout {} outside [0, 1)", s.dropout));
        }
        let r = self.selection.ratio;
        if !(r > 0.0 && r <= 1.0) {
            return bad(format!("selection ratio {r} outside (0, 1]"));
        }
        if let SelectionScope::Global { layer } = self.selection.scope {
            if layer >= self.backbone.layers {
                return bad(format!("global selection layer {layer} >= {} layers", self.backbone.layers));
            }
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.train.lr >= 0.0) || !(self.train.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative".into());
        }
        self.data.synth.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: FptConfig = toml::from_str(text).map_err(|e| FptError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FptError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Digest of the whole config, embedded in every output artifact.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_toml().as_bytes());
        h.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        FptConfig::desk().validate().unwrap();
        FptConfig::vit_b().validate().unwrap();
    }

    #[test]
    fn vit_b_token_counts() {
        let c = FptConfig::vit_b();
        assert_eq!(c.backbone.num_tokens(), 1025);
        assert_eq!(c.side_dim(), 96);
        assert_eq!(c.side_heads(), 6);
    }

    #[test]
    fn toml_round_trip_is_idempotent() {
        let c = FptConfig::desk();
        let text = c.to_toml();
        let back = FptConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = FptConfig::desk().to_toml();
        text = text.replacen("[train]", "[train]\nmomentum = 0.9", 1);
        assert!(matches!(FptConfig::from_toml(&text), Err(FptError::Config(_))));
    }

    #[test]
    fn cross_field_checks() {
        let mut c = FptConfig::desk();
        c.backbone.image_size_high = 100;
        assert!(c.validate().is_err());
        let mut c = FptConfig::desk();
        c.side.reduction_factor = 7;
        assert!(c.validate().is_err());
        let mut c = FptConfig::desk();
        c.selection.ratio = 0.0;
        assert!(c.validate().is_err());
        c.selection.ratio = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_lattice() {
        let c = FptConfig::desk();
        assert_eq!(c.effective_ratio(TrainMode::FptNoSelection), 1.0);
        assert_eq!(c.effective_ratio(TrainMode::Fpt), 0.2);
        assert_eq!(c.side_resolution(TrainMode::FptSymmetric), 128);
        assert_eq!(c.side_resolution(TrainMode::Fpt), 32);
        assert!(!TrainMode::SideOnly.uses_backbone());
        assert_eq!("fpt_symmetric".parse::<TrainMode>().unwrap(), TrainMode::FptSymmetric);
    }
}
