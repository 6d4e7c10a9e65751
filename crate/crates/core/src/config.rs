use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network dimensions shared by the backbone, adapters and experts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backbone hidden width.
    pub d: usize,
    /// Adapter bottleneck width.
    pub d_h: usize,
    /// Aligned video/text width.
    pub d_vt: usize,
    /// Frames per video.
    pub n_frames: usize,
    /// Patch tokens per frame (the frame [CLS] token is extra).
    pub n_patches: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub expert_layers: usize,
    pub expert_heads: usize,
    /// Seed for the frozen backbone weights.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_h: 8,
            d_vt: 16,
            n_frames: 8,
            n_patches: 4,
            backbone_layers: 2,
            backbone_heads: 2,
            expert_layers: 3,
            expert_heads: 2,
            backbone_seed: 1234,
        }
    }
}

impl ModelConfig {
    /// Tokens per frame including the frame [CLS] token.
    pub fn tokens_per_frame(&self) -> usize {
        self.n_patches + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d == 0 || self.d_h == 0 || self.d_vt == 0 {
            problems.push("model.d, model.d_h and model.d_vt must be positive".to_string());
        }
        if self.d_h >= self.d {
            problems.push(format!(
                "model.d_h ({}) must be smaller than model.d ({})",
                self.d_h, self.d
            ));
        }
        if self.backbone_heads == 0 || !self.d.is_multiple_of(self.backbone_heads) {
            problems.push(format!(
                "model.d ({}) must be divisible by model.backbone_heads ({})",
                self.d, self.backbone_heads
            ));
        }
        if self.expert_heads == 0 || !self.d_vt.is_multiple_of(self.expert_heads) {
            problems.push(format!(
                "model.d_vt ({}) must be divisible by model.expert_heads ({})",
                self.d_vt, self.expert_heads
            ));
        }
        if self.n_frames == 0 {
            problems.push("model.n_frames must be at least 1".to_string());
        }
        if self.backbone_layers == 0 || self.expert_layers == 0 {
            problems.push("model.backbone_layers and model.expert_layers must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.expert_layers, c.expert_heads, c.n_frames), (3, 2, 8));
    }

    #[test]
    fn bottleneck_must_be_narrower() {
        let c = ModelConfig {
            d_h: 32,
            ..Default::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("model.d_h"), "{err}");
    }

    #[test]
    fn head_divisibility() {
        let c = ModelConfig {
            backbone_heads: 3,
            expert_heads: 5,
            ..Default::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("backbone_heads") && err.contains("expert_heads"));
    }
}
