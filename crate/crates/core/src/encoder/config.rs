// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of a ViT encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Whether the token sequence starts with a class token. It is always
    /// computed through the blocks but never recorded.
    pub class_token: bool,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// ViT-B/16 at 224×224: 196 patches, width 768, 12 blocks of 12 heads.
    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            width: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            class_token: true,
            layer_norm_eps: 1e-6,
        }
    }

    /// Two-block encoder on 8×8 images with four 4×4 patches and width 16.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            width: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 4,
            class_token: true,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.width,
            self.layers,
            self.heads,
            self.mlp_ratio,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config(format!("all sizes must be positive: {self:?}")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.class_token)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn intermediate(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// Recorded states per image: the embedding output plus one per block.
    pub fn num_states(&self) -> usize {
        self.layers + 1
    }

    /// Config entries in the key layout used by container metadata and
    /// JSON sidecars.
    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("image_size".into(), self.image_size.to_string());
        m.insert("patch_size".into(), self.patch_size.to_string());
        m.insert("hidden_size".into(), self.width.to_string());
        m.insert("num_hidden_layers".into(), self.layers.to_string());
        m.insert("num_attention_heads".into(), self.heads.to_string());
        m.insert("intermediate_size".into(), self.intermediate().to_string());
        m.insert("layer_norm_eps".into(), format!("{:e}", self.layer_norm_eps));
        m
    }
}

/// Per-channel input normalization `(x - mean) / std` on `[0, 1]` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl Normalization {
    pub(crate) fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let mut norm = Self::default();
        if let Some(v) = meta.get("image_mean") {
            norm.mean = parse_triple(v, "image_mean")?;
        }
        if let Some(v) = meta.get("image_std") {
            norm.std = parse_triple(v, "image_std")?;
        }
        if norm.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config(format!("image_std must be positive: {:?}", norm.std)));
        }
        Ok(norm)
    }
}

fn parse_triple(raw: &str, key: &str) -> Result<[f32; 3]> {
    let values: Vec<f32> = serde_json::from_str(raw)
        .or_else(|_| {
            raw.split(',')
                .map(|s| s.trim().parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{raw}` as three floats")))?;
    match values.as_slice() {
        [a] => Ok([*a; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Config(format!("{key}: expected 1 or 3 values, got `{raw}`"))),
    }
}
