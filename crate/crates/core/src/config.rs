//! Model, loss and optimizer settings. Field names are the configuration keys.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn is_on(self) -> bool {
        self == Toggle::On
    }
}

impl From<bool> for Toggle {
    fn from(b: bool) -> Self {
        if b {
            Toggle::On
        } else {
            Toggle::Off
        }
    }
}

/// How the high-level map is brought to the low-level grid inside the fusion step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Bilinear resampling only.
    Bl,
    /// 3×3 stride-2 transposed convolution, then bilinear resampling.
    TconvBl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpnVariant {
    Hsfpn,
    Fpn,
    Pafpn,
    Bifpn,
    Fapn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialEncoding {
    Sin,
    Learned,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleEncoding {
    Learned,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Base width; stage outputs are `4w, 8w, 16w, 32w` and the extra block keeps `32w`.
    pub width: usize,
    /// Bottleneck blocks per residual stage.
    pub blocks: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: vec![3, 4, 6, 3],
        }
    }
}

impl BackboneConfig {
    /// Channel counts of the four emitted levels (strides 8, 16, 32, 64).
    pub fn level_channels(&self) -> [usize; 4] {
        let w = self.width;
        [8 * w, 16 * w, 32 * w, 32 * w]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpnConfig {
    pub mode: FusionMode,
    pub variant: FpnVariant,
    /// Bottleneck ratio of the channel-attention shared transform.
    pub ca_reduction: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::TconvBl,
            variant: FpnVariant::Hsfpn,
            ca_reduction: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnConfig {
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            points: 4,
            levels: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthConfig {
    pub layers: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self { layers: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeConfig {
    pub spatial: SpatialEncoding,
    pub scale: ScaleEncoding,
    pub temperature: f64,
    /// Table size of learned row/column embeddings.
    pub learned_max_len: usize,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self {
            spatial: SpatialEncoding::Sin,
            scale: ScaleEncoding::Learned,
            temperature: 10000.0,
            learned_max_len: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Foreground classes; filled from the dataset schema.
    pub num_classes: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub num_queries: usize,
    pub backbone: BackboneConfig,
    pub fpn: FpnConfig,
    pub attn: AttnConfig,
    pub enc: DepthConfig,
    pub dec: DepthConfig,
    pub pe: PeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            d_model: 256,
            d_ffn: 1024,
            dropout: 0.1,
            num_queries: 100,
            backbone: BackboneConfig::default(),
            fpn: FpnConfig::default(),
            attn: AttnConfig::default(),
            enc: DepthConfig::default(),
            dec: DepthConfig::default(),
            pe: PeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            bail!(Config, "num_classes must be positive");
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.attn.heads.max(1)) {
            bail!(Config, "d_model {} must be a positive multiple of attn.heads {}", self.d_model, self.attn.heads);
        }
        if !self.d_model.is_multiple_of(2) {
            bail!(Config, "d_model must be even for the two-axis position encoding");
        }
        if self.attn.points == 0 || self.attn.heads == 0 {
            bail!(Config, "attn.heads and attn.points must be positive");
        }
        if self.attn.levels != 4 {
            bail!(Config, "attn.levels must be 4 (the pyramid has four levels), got {}", self.attn.levels);
        }
        if self.dec.layers == 0 {
            bail!(Config, "dec.layers must be at least 1");
        }
        if self.num_queries == 0 {
            bail!(Config, "num_queries must be positive");
        }
        if self.backbone.width == 0 || self.backbone.blocks.len() != 4 || self.backbone.blocks.contains(&0) {
            bail!(Config, "backbone needs a positive width and four non-empty stages");
        }
        if self.fpn.ca_reduction == 0 {
            bail!(Config, "fpn.ca_reduction must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Per-class focal weights: derived from class frequencies or given explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Explicit(Vec<f64>),
    Keyword(AlphaKeyword),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaKeyword {
    Auto,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub l1: Toggle,
    pub giou: Toggle,
    pub aux: Toggle,
    pub gamma: f64,
    pub alpha: AlphaSpec,
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            l1: Toggle::On,
            giou: Toggle::On,
            aux: Toggle::On,
            gamma: 2.0,
            alpha: AlphaSpec::Keyword(AlphaKeyword::Auto),
            class_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_fpn: f64,
    pub lr_transformer: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_gamma: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 2e-5,
            lr_fpn: 3e-4,
            lr_transformer: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            lr_step: 40,
            lr_gamma: 0.1,
            grad_clip: 0.1,
        }
    }
}

/// A name-prefix → learning-rate assignment.
pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("backbone.") {
        ParamGroup::Backbone
    } else if name.starts_with("fpn.") {
        ParamGroup::Fpn
    } else {
        ParamGroup::Transformer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Fpn,
    Transformer,
}

impl OptimConfig {
    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Fpn => self.lr_fpn,
            ParamGroup::Transformer => self.lr_transformer,
        }
    }
}
