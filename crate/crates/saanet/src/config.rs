//! Central hyperparameter registry.
//!
//! Every tunable number in the crate lives here (or in a JSON file
//! deserialized into these structs); modules must not embed magic constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture-wide defaults that are not per-run tunables.
pub mod defaults {
    /// MLP hidden width = ratio × embedding width inside every encoder block.
    pub const MLP_RATIO: usize = 4;
    pub const LAYER_NORM_EPS: f64 = 1e-5;
    /// Sampled points per head per level in deformable attention.
    pub const DEFORM_POINTS: usize = 4;
    /// Attention heads per backbone stage (head width stays constant).
    pub const STAGE_HEADS: [usize; 4] = [2, 4, 8, 16];
    /// Divisor applied to all channel widths for the desk-scale variant.
    pub const TOY_WIDTH_DIVISOR: usize = 8;
    /// Std-dev of the depthwise positional-encoding kernel init.
    pub const CPE_INIT_STD: f64 = 0.02;
    /// Std-dev of embedding-vector inits (scale-level embedding, count query).
    pub const EMBED_INIT_STD: f64 = 0.02;
    /// Ground-truth Gaussian width on the 1/8 annotation grid, in cells.
    pub const GT_SIGMA: f64 = 1.0;
    /// Weight of the |ΣD − C*| term inside the default density loss.
    pub const DENSITY_COUNT_WEIGHT: f64 = 1.0;
    /// Weight of the query-count term ℓ_Q in the composite loss. Equal
    /// weighting: the count branch's gradients act as a useful auxiliary
    /// signal for the shared features once the cosine schedule lets training
    /// settle (down-weighting it measurably hurts the full model).
    pub const COUNT_LOSS_WEIGHT: f64 = 1.0;
    /// Global ℓ₂ gradient-norm ceiling applied before each optimizer step.
    pub const GRAD_CLIP: f64 = 1.0;
    /// Seed offset separating the eval scene stream from the train stream.
    pub const EVAL_SEED_OFFSET: u64 = 1_000_000;
}

/// Stage block composition: early stages run deformable attention only,
/// late stages alternate deformable and global attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageBlocks {
    /// n deformable-attention blocks.
    DaOnly(usize),
    /// n × (deformable, global) block pairs.
    Pairs(usize),
}

impl StageBlocks {
    pub fn block_count(self) -> usize {
        match self {
            StageBlocks::DaOnly(n) => n,
            StageBlocks::Pairs(n) => 2 * n,
        }
    }
}

/// Four-stage hierarchical backbone settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformerConfig {
    pub channels: [usize; 4],
    pub heads: [usize; 4],
    pub blocks: [StageBlocks; 4],
    /// Sampled points per head (deformable blocks).
    pub k_points: usize,
    pub dropout_rate: f64,
}

impl DeformerConfig {
    /// Lightest published variant: widths 96–768, 3 attention pairs at stage 3.
    pub fn tiny() -> Self {
        DeformerConfig {
            channels: [96, 192, 384, 768],
            heads: defaults::STAGE_HEADS,
            blocks: [
                StageBlocks::DaOnly(2),
                StageBlocks::DaOnly(2),
                StageBlocks::Pairs(3),
                StageBlocks::Pairs(1),
            ],
            k_points: defaults::DEFORM_POINTS,
            dropout_rate: 0.0,
        }
    }

    /// Same widths as tiny, 9 attention pairs at stage 3.
    pub fn small() -> Self {
        DeformerConfig {
            blocks: [
                StageBlocks::DaOnly(2),
                StageBlocks::DaOnly(2),
                StageBlocks::Pairs(9),
                StageBlocks::Pairs(1),
            ],
            ..Self::tiny()
        }
    }

    /// Widths 128–1024, 9 attention pairs at stage 3.
    pub fn base() -> Self {
        DeformerConfig {
            channels: [128, 256, 512, 1024],
            ..Self::small()
        }
    }

    /// Desk-scale variant: tiny block structure at 1/8 channel width.
    pub fn toy() -> Self {
        let mut cfg = Self::tiny();
        for c in &mut cfg.channels {
            *c /= defaults::TOY_WIDTH_DIVISOR;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (&c, &h)) in self.channels.iter().zip(&self.heads).enumerate() {
            if c == 0 || h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: channels {} not divisible by heads {}",
                    i + 1,
                    c,
                    h
                )));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            match (i, b) {
                (0 | 1, StageBlocks::Pairs(_)) => {
                    return Err(Error::Config(format!(
                        "stage {}: early stages take deformable blocks only",
                        i + 1
                    )))
                }
                (2 | 3, StageBlocks::DaOnly(_)) => {
                    return Err(Error::Config(format!(
                        "stage {}: late stages take attention pairs",
                        i + 1
                    )))
                }
                _ => {}
            }
            if b.block_count() == 0 {
                return Err(Error::Config(format!("stage {} has zero blocks", i + 1)));
            }
        }
        if self.k_points == 0 {
            return Err(Error::Config("k_points must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Multi-level feature fusion settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Common token width after per-level projection.
    pub d_fuse: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub k_points: usize,
    pub dropout_rate: f64,
}

impl FusionConfig {
    pub fn full() -> Self {
        FusionConfig {
            d_fuse: 256,
            n_heads: 8,
            n_layers: 4,
            k_points: defaults::DEFORM_POINTS,
            dropout_rate: 0.0,
        }
    }

    pub fn toy() -> Self {
        FusionConfig {
            d_fuse: 32,
            n_heads: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_fuse == 0 || self.n_heads == 0 || self.d_fuse % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_fuse {} not divisible by heads {}",
                self.d_fuse, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.k_points == 0 {
            return Err(Error::Config("fusion needs ≥ 1 layer and ≥ 1 sample point".into()));
        }
        Ok(())
    }
}

/// Count-attentive feature enhancement (decoder) settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CafeConfig {
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout_rate: f64,
}

impl CafeConfig {
    pub fn full() -> Self {
        CafeConfig {
            n_heads: 8,
            n_layers: 4,
            dropout_rate: 0.0,
        }
    }

    pub fn toy() -> Self {
        CafeConfig {
            n_heads: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self, d_fuse: usize) -> Result<()> {
        if self.n_heads == 0 || d_fuse % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "decoder heads {} must divide token width {}",
                self.n_heads, d_fuse
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("decoder needs ≥ 1 layer".into()));
        }
        Ok(())
    }
}

/// Whole-model configuration, including the ablation toggles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: DeformerConfig,
    pub fusion: FusionConfig,
    pub cafe: CafeConfig,
    /// Multi-level feature fusion on/off (off = projected F2 tokens pass through).
    pub use_mff: bool,
    /// Count decoder + recalibration on/off.
    pub use_cafe: bool,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            backbone: DeformerConfig::toy(),
            fusion: FusionConfig::toy(),
            cafe: CafeConfig::toy(),
            use_mff: true,
            use_cafe: true,
        }
    }

    pub fn full_tiny() -> Self {
        ModelConfig {
            backbone: DeformerConfig::tiny(),
            fusion: FusionConfig::full(),
            cafe: CafeConfig::full(),
            use_mff: true,
            use_cafe: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate()?;
        self.cafe.validate(self.fusion.d_fuse)
    }
}

/// Optimizer settings (decoupled weight decay).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global ℓ₂ gradient norm per step; `None` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
}

fn default_grad_clip() -> Option<f64> {
    Some(defaults::GRAD_CLIP)
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(defaults::GRAD_CLIP),
        }
    }
}

/// Synthetic scene-generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub count_min: usize,
    pub count_max: usize,
    /// Base rendered head size (box side, pixels) at the top of the image.
    pub base_head_size: f64,
    /// Linear growth of head size with normalized y (perspective proxy).
    pub perspective_gradient: f64,
    /// Std-dev of background clutter noise in [0,1] intensity units.
    pub clutter: f64,
    /// Probability of emitting a negative sample (count forced to 0).
    pub negative_fraction: f64,
}

impl SceneConfig {
    pub fn toy() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            count_min: 2,
            count_max: 12,
            base_head_size: 3.0,
            perspective_gradient: 6.0,
            clutter: 0.05,
            negative_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "scene extent {}×{} must be divisible by 32",
                self.height, self.width
            )));
        }
        if self.count_min > self.count_max {
            return Err(Error::Config("count range is inverted".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_fraction) {
            return Err(Error::Config("negative_fraction outside [0,1]".into()));
        }
        Ok(())
    }
}

/// One run = model + optimizer + data + schedule. This is the JSON schema
/// behind the CLI's `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            optim: OptimConfig::default(),
            scene: SceneConfig::toy(),
            train_scenes: 8,
            eval_scenes: 4,
            epochs: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        if self.train_scenes == 0 || self.epochs == 0 {
            return Err(Error::Config("training needs ≥ 1 scene and ≥ 1 epoch".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_json_without_grad_clip_gets_the_default() {
        let json = r#"{"learning_rate": 1e-3, "weight_decay": 0.05,
                       "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}"#;
        let cfg: OptimConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.grad_clip, Some(defaults::GRAD_CLIP));
        let disabled: OptimConfig =
            serde_json::from_str(&json.replace("}", ", \"grad_clip\": null}")).unwrap();
        assert_eq!(disabled.grad_clip, None);
    }

    #[test]
    fn published_variants_validate() {
        for cfg in [DeformerConfig::tiny(), DeformerConfig::small(), DeformerConfig::base(), DeformerConfig::toy()] {
            cfg.validate().unwrap();
        }
        ModelConfig::toy().validate().unwrap();
        ModelConfig::full_tiny().validate().unwrap();
    }

    #[test]
    fn block_structure_is_enforced() {
        let mut cfg = DeformerConfig::tiny();
        cfg.blocks[0] = StageBlocks::Pairs(1);
        assert!(cfg.validate().is_err());
        let mut cfg = DeformerConfig::tiny();
        cfg.blocks[3] = StageBlocks::DaOnly(2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_widths_stay_divisible_by_heads() {
        let cfg = DeformerConfig::toy();
        assert_eq!(cfg.channels, [12, 24, 48, 96]);
        for (c, h) in cfg.channels.iter().zip(&cfg.heads) {
            assert_eq!(c % h, 0);
        }
    }

    #[test]
    fn run_config_round_trips_through_json() {
        let cfg = RunConfig::toy();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model.backbone.channels, cfg.model.backbone.channels);
        assert_eq!(back.epochs, cfg.epochs);
    }
}
