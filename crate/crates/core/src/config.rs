use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::WindowKind;

/// Which pooled descriptors feed the coordinate-attention gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GgcaPooling {
    Avg,
    Max,
    AvgMax,
}

impl GgcaPooling {
    pub fn uses_avg(self) -> bool {
        matches!(self, GgcaPooling::Avg | GgcaPooling::AvgMax)
    }

    pub fn uses_max(self) -> bool {
        matches!(self, GgcaPooling::Max | GgcaPooling::AvgMax)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GgcaConfig {
    pub groups: usize,
    pub reduction: usize,
    pub pooling: GgcaPooling,
    pub min_mid_channels: usize,
}

impl Default for GgcaConfig {
    fn default() -> Self {
        GgcaConfig {
            groups: 4,
            reduction: 8,
            pooling: GgcaPooling::AvgMax,
            min_mid_channels: 4,
        }
    }
}

impl GgcaConfig {
    pub fn group_channels(&self, channels: usize) -> Result<usize> {
        if self.groups == 0 || self.reduction == 0 || self.min_mid_channels == 0 {
            return Err(Error::Config(
                "groups, reduction and min_mid_channels must be positive".into(),
            ));
        }
        if channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels not divisible into {} groups",
                self.groups
            )));
        }
        Ok(channels / self.groups)
    }

    /// Bottleneck width `max(min_mid_channels, floor(c_g / r))`.
    pub fn mid_channels(&self, channels: usize) -> Result<usize> {
        let cg = self.group_channels(channels)?;
        Ok(self.min_mid_channels.max(cg / self.reduction))
    }
}

/// Architecture hyperparameters for the whole tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Total transformer blocks `L`.
    pub depth: usize,
    /// Saturated layer `l*` (1-based); blocks `1..=l*` always run.
    pub saturated_layer: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub template_side: usize,
    pub search_side: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f32,
    pub selector_hidden: usize,
    pub ggca: GgcaConfig,
    pub head_channels: usize,
    pub window: WindowKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 12,
            saturated_layer: 8,
            embed_dim: 192,
            heads: 3,
            patch: 16,
            template_side: 128,
            search_side: 256,
            mlp_ratio: 4,
            layer_norm_eps: 1e-6,
            selector_hidden: 160,
            ggca: GgcaConfig::default(),
            head_channels: 32,
            window: WindowKind::Hann,
        }
    }
}

impl ModelConfig {
    /// A few-hundred-parameter configuration for tests and examples.
    pub fn tiny() -> Self {
        ModelConfig {
            depth: 6,
            saturated_layer: 3,
            embed_dim: 8,
            heads: 2,
            patch: 4,
            template_side: 8,
            search_side: 16,
            mlp_ratio: 2,
            layer_norm_eps: 1e-6,
            selector_hidden: 16,
            ggca: GgcaConfig {
                groups: 2,
                reduction: 2,
                pooling: GgcaPooling::AvgMax,
                min_mid_channels: 1,
            },
            head_channels: 4,
            window: WindowKind::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 || self.patch == 0 {
            return bad("depth, embed_dim, heads and patch must be positive".into());
        }
        if self.saturated_layer == 0 || self.saturated_layer >= self.depth {
            return bad(format!(
                "saturated layer must satisfy 1 <= l* < L, got l*={} L={}",
                self.saturated_layer, self.depth
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        for (name, side) in [("template", self.template_side), ("search", self.search_side)] {
            if side == 0 || side % self.patch != 0 {
                return bad(format!("{name} side {side} not a multiple of patch {}", self.patch));
            }
        }
        if self.mlp_ratio == 0 || self.selector_hidden == 0 || self.head_channels == 0 {
            return bad("mlp_ratio, selector_hidden and head_channels must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        self.ggca.group_channels(self.embed_dim)?;
        Ok(())
    }

    pub fn template_grid(&self) -> usize {
        self.template_side / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search_side / self.patch
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid().pow(2)
    }

    pub fn search_tokens(&self) -> usize {
        self.search_grid().pow(2)
    }

    pub fn tokens(&self) -> usize {
        self.template_tokens() + self.search_tokens()
    }

    /// Number of candidate blocks after the saturated layer, `K = L - l*`.
    pub fn choices(&self) -> usize {
        self.depth - self.saturated_layer
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Short hex digest of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
