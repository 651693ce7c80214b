use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::serialize::{Curve, DEFAULT_DEPTH, MAX_DEPTH};
use crate::ssm::MambaConfig;

/// Which block types the encoder stack runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Hybrid,
    MambaOnly,
    TransformerOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Hybrid, Variant::MambaOnly, Variant::TransformerOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hybrid => "hybrid",
            Variant::MambaOnly => "mamba_only",
            Variant::TransformerOnly => "transformer_only",
        }
    }

    pub fn uses_mamba(self) -> bool {
        self != Variant::TransformerOnly
    }

    pub fn uses_attention(self) -> bool {
        self != Variant::MambaOnly
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}'")))
    }
}

/// AdamW with global-norm clipping and step decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm threshold.
    pub clip: f64,
    /// Multiply the step size by `decay` every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 0.5,
            decay: 0.9,
            decay_every: 5,
        }
    }
}

/// Full model and training configuration. Hierarchy levels are fine (1),
/// semi-dense (2) and superpoint (3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Encoder width.
    pub width: usize,
    pub blocks: usize,
    pub variant: Variant,
    pub curve: Curve,
    pub depth: u32,
    pub order_indicator: bool,
    pub state: usize,
    pub expand: usize,
    pub heads: usize,
    pub desc_width: usize,
    /// Dual-softmax temperature.
    pub tau: f64,
    /// Mutual top-k for coarse pairs.
    pub top_k: usize,
    /// Maximum number of keypoints per cloud.
    pub keypoint_budget: usize,
    /// Fine search radius as a multiple of the fine voxel size.
    pub fine_radius: f64,
    /// Length-consistency tolerance as a multiple of the fine voxel size.
    pub consistency: f64,
    /// Inlier label threshold in scene units.
    pub inlier_radius: f64,
    pub min_points: usize,
    /// Align the fine stage with the ground truth while training.
    pub teacher_forcing: bool,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            width: 32,
            blocks: 3,
            variant: Variant::Hybrid,
            curve: Curve::Zorder,
            depth: DEFAULT_DEPTH,
            order_indicator: false,
            state: 8,
            expand: 2,
            heads: 1,
            desc_width: 32,
            tau: 0.1,
            top_k: 3,
            keypoint_budget: 256,
            fine_radius: 2.0,
            consistency: 2.0,
            inlier_radius: 0.05,
            min_points: 100,
            teacher_forcing: true,
            loss: LossWeights::kitti(),
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small widths and coarse voxels for fast desk-scale training.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig {
                voxel_sizes: vec![0.1, 0.2, 0.5],
                widths: vec![8, 16, 16],
            },
            width: 16,
            blocks: 2,
            state: 4,
            desc_width: 16,
            keypoint_budget: 64,
            inlier_radius: 0.1,
            min_points: 50,
            optim: OptimConfig {
                lr: 3e-3,
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            width: self.width,
            expand: self.expand,
            state: self.state,
            conv_kernel: 4,
            order_indicator: self.order_indicator,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            width: self.width,
            heads: self.heads,
            mlp_ratio: 2,
        }
    }

    pub fn fine_voxel(&self) -> f64 {
        self.backbone.voxel_sizes[0]
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.voxel_sizes.len() != 3 {
            return Err(Error::InvalidConfig("the model uses exactly three hierarchy levels".into()));
        }
        if self.backbone.voxel_sizes.windows(2).any(|w| !(w[0] > 0.0 && w[1] > w[0])) {
            return Err(Error::NonAscendingVoxels);
        }
        if self.width == 0 || self.desc_width == 0 || self.blocks == 0 || self.keypoint_budget == 0 {
            return Err(Error::InvalidConfig("widths, block count and budget must be positive".into()));
        }
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return Err(Error::InvalidDepth(self.depth));
        }
        if !(self.tau > 0.0) || !(self.fine_radius > 0.0) || !(self.consistency > 0.0) || !(self.inlier_radius > 0.0) {
            return Err(Error::InvalidConfig("temperatures and radii must be positive".into()));
        }
        self.mamba().validate()?;
        self.attention().validate()?;
        self.loss.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = ModelConfig::toy();
        assert_eq!(ModelConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = ModelConfig::from_json(r#"{"variant": "mamba_only", "curve": "hilbert"}"#).unwrap();
        assert_eq!(partial.variant, Variant::MambaOnly);
        assert_eq!(partial.curve, Curve::Hilbert);
        assert_eq!(partial.width, ModelConfig::default().width);
        assert!(ModelConfig::from_json(r#"{"variant": "both"}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"width": 0}"#).is_err());
    }

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        let o = OptimConfig::default();
        assert_eq!((o.lr, o.weight_decay, o.clip), (1e-4, 1e-4, 0.5));
    }
}
