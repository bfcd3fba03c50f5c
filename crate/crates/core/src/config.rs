//! Hyperparameter records for the two encoder paths and the assembled model.

use serde::{Deserialize, Serialize};

use crate::error::{CatsError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    /// Patch edge in voxels.
    pub patch: usize,
    /// Token embedding width.
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub in_channels: usize,
    /// 1-based layer indices whose outputs are tapped, strictly increasing, ending at `layers`.
    pub tap_layers: Vec<usize>,
    pub mlp_hidden: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(CatsError::config(format!("transformer.{field}"), msg));
        if self.patch == 0 {
            return err("patch", "must be positive".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err(
                "heads",
                format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads),
            );
        }
        if self.layers == 0 {
            return err("layers", "must be positive".into());
        }
        if self.in_channels == 0 || self.mlp_hidden == 0 {
            return err("mlp_hidden", "channel counts must be positive".into());
        }
        if self.tap_layers.is_empty() {
            return err("tap_layers", "at least one tap is required".into());
        }
        if self.tap_layers[0] == 0 || self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return err("tap_layers", format!("{:?} must be strictly increasing and 1-based", self.tap_layers));
        }
        if *self.tap_layers.last().unwrap() != self.layers {
            return err(
                "tap_layers",
                format!("last tap {:?} must equal layers = {}", self.tap_layers.last(), self.layers),
            );
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Patch grid extents for an input of `extents` voxels.
    pub fn grid(&self, extents: [usize; 3]) -> Result<[usize; 3]> {
        let mut g = [0; 3];
        for (axis, (&e, out)) in extents.iter().zip(g.iter_mut()).enumerate() {
            if e % self.patch != 0 {
                return Err(CatsError::config(
                    "transformer.patch",
                    format!("patch {} does not divide extent {} on axis {}", self.patch, e, axis),
                ));
            }
            *out = e / self.patch;
        }
        Ok(g)
    }

    pub fn patch_width(&self) -> usize {
        self.patch.pow(3) * self.in_channels
    }
}

/// Evenly spaced tap layers ending at the last layer: `round(i * layers / count)`.
pub fn default_taps(layers: usize, count: usize) -> Vec<usize> {
    (1..=count)
        .map(|i| ((i * layers) as f64 / count as f64).round().max(1.0) as usize)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Number of 2x max-pooling steps.
    pub depth: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub batch_norm: bool,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(CatsError::config("unet.depth", "must be at least 1"));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(CatsError::config("unet.base_channels", "channel counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(CatsError::config("unet.num_classes", "need background plus at least one class"));
        }
        Ok(())
    }

    /// `[F, 2F, 4F, ...]`, one width per resolution level.
    pub fn ladder(&self) -> Vec<usize> {
        (0..=self.depth).map(|i| self.base_channels << i).collect()
    }

    pub fn check_extents(&self, extents: [usize; 3]) -> Result<()> {
        let m = 1 << self.depth;
        if let Some(&bad) = extents.iter().find(|&&e| e % m != 0 || e == 0) {
            return Err(CatsError::config(
                "input_extents",
                format!("extent {} is not divisible by 2^depth = {}", bad, m),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatsConfig {
    pub transformer: TransformerConfig,
    pub unet: UNetConfig,
    /// Training patch extents; the position embedding is sized for this grid.
    pub input_extents: [usize; 3],
}

impl CatsConfig {
    /// Depth 3, P=8, L=4, M=64, n=4, F=8, 32^3 patches.
    pub fn desk() -> Self {
        Self::desk_with_classes(2)
    }

    pub fn desk_with_classes(num_classes: usize) -> Self {
        CatsConfig {
            transformer: TransformerConfig {
                patch: 8,
                embed_dim: 64,
                layers: 4,
                heads: 4,
                in_channels: 1,
                tap_layers: default_taps(4, 3),
                mlp_hidden: 256,
            },
            unet: UNetConfig { base_channels: 8, depth: 3, num_classes, in_channels: 1, batch_norm: true },
            input_extents: [32; 3],
        }
    }

    /// Depth 2, P=4, L=2, M=16, n=2, F=4, 16^3 patches: small enough for exhaustive checks.
    pub fn toy() -> Self {
        CatsConfig {
            transformer: TransformerConfig {
                patch: 4,
                embed_dim: 16,
                layers: 2,
                heads: 2,
                in_channels: 1,
                tap_layers: default_taps(2, 2),
                mlp_hidden: 32,
            },
            unet: UNetConfig { base_channels: 4, depth: 2, num_classes: 2, in_channels: 1, batch_norm: true },
            input_extents: [16; 3],
        }
    }

    /// Depth 4, P=16, L=12 with taps {3,6,9,12}, M=768, n=8, F=32, 96^3 patches.
    pub fn full(num_classes: usize) -> Self {
        CatsConfig {
            transformer: TransformerConfig {
                patch: 16,
                embed_dim: 768,
                layers: 12,
                heads: 8,
                in_channels: 1,
                tap_layers: default_taps(12, 4),
                mlp_hidden: 3072,
            },
            unet: UNetConfig { base_channels: 32, depth: 4, num_classes, in_channels: 1, batch_norm: true },
            input_extents: [96; 3],
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk_with_classes(num_classes)),
            "full" => Ok(Self::full(num_classes)),
            "toy" => Ok(Self { unet: UNetConfig { num_classes, ..Self::toy().unet }, ..Self::toy() }),
            other => Err(CatsError::UnknownName {
                kind: "preset",
                name: other.into(),
                available: "desk, full, toy".into(),
            }),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.unet.num_classes
    }

    pub fn depth(&self) -> usize {
        self.unet.depth
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.unet.check_extents(self.input_extents)?;
        self.validate_transformer()
    }

    /// Checks that only matter when the transformer path is present.
    pub fn validate_transformer(&self) -> Result<()> {
        let t = &self.transformer;
        t.validate()?;
        if t.patch != 1 << self.unet.depth {
            return Err(CatsError::config(
                "transformer.patch",
                format!(
                    "patch grid (1/{}) must match the U-Net bottleneck (1/2^{} = 1/{})",
                    t.patch,
                    self.unet.depth,
                    1 << self.unet.depth
                ),
            ));
        }
        if t.tap_layers.len() != self.unet.depth {
            return Err(CatsError::config(
                "transformer.tap_layers",
                format!("{} taps given, one per fused level ({}) required", t.tap_layers.len(), self.unet.depth),
            ));
        }
        if t.in_channels != self.unet.in_channels {
            return Err(CatsError::config("transformer.in_channels", "must equal unet.in_channels"));
        }
        t.grid(self.input_extents)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        CatsConfig::desk().validate().unwrap();
        CatsConfig::full(14).validate().unwrap();
        CatsConfig::toy().validate().unwrap();
        assert_eq!(CatsConfig::full(2).transformer.tap_layers, vec![3, 6, 9, 12]);
    }

    #[test]
    fn desk_taps_end_at_last_layer() {
        let taps = CatsConfig::desk().transformer.tap_layers;
        assert_eq!(taps.len(), 3);
        assert_eq!(*taps.last().unwrap(), 4);
        assert_eq!(taps, vec![1, 3, 4]);
    }

    #[test]
    fn rejects_mismatched_patch_and_depth() {
        let mut c = CatsConfig::desk();
        c.transformer.patch = 16;
        assert!(matches!(c.validate(), Err(CatsError::Config { field, .. }) if field == "transformer.patch"));
    }

    #[test]
    fn rejects_heads_not_dividing_width() {
        let mut c = CatsConfig::desk();
        c.transformer.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_zero_depth() {
        let mut c = CatsConfig::desk();
        c.unet.depth = 0;
        assert!(matches!(c.validate(), Err(CatsError::Config { field, .. }) if field == "unet.depth"));
    }

    #[test]
    fn ladder_doubles() {
        assert_eq!(CatsConfig::desk().unet.ladder(), vec![8, 16, 32, 64]);
        assert_eq!(CatsConfig::full(2).unet.ladder(), vec![32, 64, 128, 256, 512]);
    }
}
