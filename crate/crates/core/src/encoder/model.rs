// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm ViT forward pass with per-layer taps and intervention hooks.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, Normalization};
use super::weights::{infer_config, validate_store, NamedTensorStore};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Which weights produced a set of activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitKind {
    Pretrained,
    Random { seed: u64 },
}

impl InitKind {
    /// Short stable key used in file names and tables.
    pub fn key(&self) -> String {
        match self {
            InitKind::Pretrained => "pretrained".into(),
            InitKind::Random { seed } => format!("random-{seed}"),
        }
    }

    pub fn is_pretrained(&self) -> bool {
        matches!(self, InitKind::Pretrained)
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

type Transform = dyn Fn(&Tensor) -> Result<Tensor> + Send + Sync;

/// A transform applied to the patch-token activations (`[patches × width]`)
/// at one recorded layer. Layer 0 is the embedding output, layer `l ≥ 1`
/// the output of block `l`.
#[derive(Clone)]
pub struct InterventionHook {
    pub layer: usize,
    transform: Arc<Transform>,
}

impl fmt::Debug for InterventionHook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InterventionHook").field("layer", &self.layer).finish_non_exhaustive()
    }
}

impl InterventionHook {
    pub fn new<F>(layer: usize, transform: F) -> Self
    where
        F: Fn(&Tensor) -> Result<Tensor> + Send + Sync + 'static,
    {
        Self {
            layer,
            transform: Arc::new(transform),
        }
    }

    pub fn identity(layer: usize) -> Self {
        Self::new(layer, |t| Ok(t.clone()))
    }

    pub fn apply(&self, patches: &Tensor) -> Result<Tensor> {
        let out = (self.transform)(patches)?;
        if out.shape() != patches.shape() {
            return Err(Error::Contract(format!(
                "hook at layer {} changed shape {:?} -> {:?}",
                self.layer,
                patches.shape(),
                out.shape()
            )));
        }
        Ok(out)
    }
}

/// Patch-token activations of one image at every recorded layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateStack {
    /// `[(layers + 1) × patches × width]`.
    pub values: Tensor,
    pub image_id: String,
    pub init_kind: InitKind,
}

impl HiddenStateStack {
    pub fn num_states(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Flat `[patches × width]` slice for one layer.
    pub fn layer(&self, layer: usize) -> &[f32] {
        let stride = self.num_patches() * self.width();
        &self.values.data()[layer * stride..(layer + 1) * stride]
    }

    pub fn layer_tensor(&self, layer: usize) -> Result<Tensor> {
        self.values.index_first(layer)
    }

    pub fn patch(&self, layer: usize, patch: usize) -> &[f32] {
        let w = self.width();
        &self.layer(layer)[patch * w..(patch + 1) * w]
    }
}

struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    q_w: Tensor,
    q_b: Tensor,
    k_w: Tensor,
    k_b: Tensor,
    v_w: Tensor,
    v_b: Tensor,
    o_w: Tensor,
    o_b: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
}

/// Validated encoder ready for inference.
pub struct Encoder {
    config: EncoderConfig,
    normalization: Normalization,
    init_kind: InitKind,
    patch_w: Tensor,
    patch_b: Tensor,
    pos: Tensor,
    cls: Option<Tensor>,
    blocks: Vec<Block>,
}

impl fmt::Debug for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Encoder")
            .field("config", &self.config)
            .field("normalization", &self.normalization)
            .field("init_kind", &self.init_kind)
            .finish_non_exhaustive()
    }
}

impl Encoder {
    /// Builds an encoder from a store, inferring the config from shapes and
    /// metadata. `init_kind` is recorded on every stack it produces.
    pub fn from_store(store: &NamedTensorStore, init_kind: InitKind) -> Result<Self> {
        let config = infer_config(store)?;
        validate_store(store, &config)?;
        let normalization = Normalization::from_metadata(&store.metadata)?;
        let get = |name: &str| store.get(name).cloned();
        let w = config.width;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let g = |s: &str| get(&format!("encoder.layer.{l}.{s}"));
            blocks.push(Block {
                ln1_g: g("layernorm_before.weight")?,
                ln1_b: g("layernorm_before.bias")?,
                q_w: g("attention.attention.query.weight")?,
                q_b: g("attention.attention.query.bias")?,
                k_w: g("attention.attention.key.weight")?,
                k_b: g("attention.attention.key.bias")?,
                v_w: g("attention.attention.value.weight")?,
                v_b: g("attention.attention.value.bias")?,
                o_w: g("attention.output.dense.weight")?,
                o_b: g("attention.output.dense.bias")?,
                ln2_g: g("layernorm_after.weight")?,
                ln2_b: g("layernorm_after.bias")?,
                fc1_w: g("intermediate.dense.weight")?,
                fc1_b: g("intermediate.dense.bias")?,
                fc2_w: g("output.dense.weight")?,
                fc2_b: g("output.dense.bias")?,
            });
        }
        let patch_w = get("embeddings.patch_embeddings.projection.weight")?
            .reshape(vec![w, 3 * config.patch_size * config.patch_size])?;
        Ok(Self {
            normalization,
            init_kind,
            patch_b: get("embeddings.patch_embeddings.projection.bias")?,
            pos: get("embeddings.position_embeddings")?.reshape(vec![config.num_tokens(), w])?,
            cls: if config.class_token {
                Some(get("embeddings.cls_token")?.reshape(vec![1, w])?)
            } else {
                None
            },
            patch_w,
            blocks,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn init_kind(&self) -> InitKind {
        self.init_kind
    }

    /// Token sequence after patch projection and position embedding.
    fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let s = c.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::Dimension(format!(
                "image shape {:?}, expected [3, {s}, {s}]",
                image.shape()
            )));
        }
        let p = c.patch_size;
        let g = c.grid_side();
        let px = image.data();
        // Flatten each patch in (channel, row, col) order to match the
        // convolution kernel layout.
        let mut cols = Vec::with_capacity(c.num_patches() * 3 * p * p);
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..3 {
                    for y in 0..p {
                        let row = ch * s * s + (gy * p + y) * s + gx * p;
                        cols.extend_from_slice(&px[row..row + p]);
                    }
                }
            }
        }
        let cols = Tensor::new(vec![c.num_patches(), 3 * p * p], cols)?;
        let patches = tensor::linear(&cols, &self.patch_w, Some(&self.patch_b))?;
        let tokens = match &self.cls {
            Some(cls) => {
                let mut data = cls.data().to_vec();
                data.extend_from_slice(patches.data());
                Tensor::new(vec![c.num_tokens(), c.width], data)?
            }
            None => patches,
        };
        tensor::add(&tokens, &self.pos)
    }

    fn attention(&self, b: &Block, x: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let t = x.shape()[0];
        let dh = c.head_dim();
        let q = tensor::linear(x, &b.q_w, Some(&b.q_b))?;
        let k = tensor::linear(x, &b.k_w, Some(&b.k_b))?;
        let v = tensor::linear(x, &b.v_w, Some(&b.v_b))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let head_cols = |m: &Tensor, h: usize| -> Result<Tensor> {
            let data = m.rows().flat_map(|r| r[h * dh..(h + 1) * dh].iter().copied()).collect();
            Tensor::new(vec![t, dh], data)
        };
        let mut merged = vec![0.0f32; t * c.width];
        for h in 0..c.heads {
            let qh = head_cols(&q, h)?;
            let kh = head_cols(&k, h)?;
            let vh = head_cols(&v, h)?;
            // q · kᵀ is a linear map with k as the weight matrix.
            let scores = tensor::linear(&qh, &kh, None)?;
            let scaled: Vec<f64> = scores.data().iter().map(|&s| s as f64 * scale).collect();
            let scaled = Tensor::from_f64(vec![t, t], scaled, "attention scores")?;
            let probs = tensor::softmax_rows(&scaled);
            let ctx = tensor::matmul(&probs, &vh)?;
            for (i, row) in ctx.rows().enumerate() {
                merged[i * c.width + h * dh..i * c.width + (h + 1) * dh].copy_from_slice(row);
            }
        }
        let merged = Tensor::new(vec![t, c.width], merged)?;
        tensor::linear(&merged, &b.o_w, Some(&b.o_b))
    }

    fn block(&self, b: &Block, x: &Tensor) -> Result<Tensor> {
        let eps = self.config.layer_norm_eps;
        let h = tensor::layer_norm(x, &b.ln1_g, &b.ln1_b, eps)?;
        let x = tensor::add(x, &self.attention(b, &h)?)?;
        let h = tensor::layer_norm(&x, &b.ln2_g, &b.ln2_b, eps)?;
        let h = tensor::gelu(&tensor::linear(&h, &b.fc1_w, Some(&b.fc1_b))?);
        let h = tensor::linear(&h, &b.fc2_w, Some(&b.fc2_b))?;
        tensor::add(&x, &h)
    }

    /// Applies the hooks registered for `layer` to the patch rows of `tokens`,
    /// leaving the class-token row untouched.
    fn apply_hooks(&self, layer: usize, tokens: Tensor, hooks: &[InterventionHook]) -> Result<Tensor> {
        let mut active = hooks.iter().filter(|h| h.layer == layer).peekable();
        if active.peek().is_none() {
            return Ok(tokens);
        }
        let skip = usize::from(self.config.class_token);
        let w = self.config.width;
        let mut data = tokens.into_data();
        let mut patches = Tensor::new(vec![self.config.num_patches(), w], data[skip * w..].to_vec())?;
        for hook in active {
            patches = hook.apply(&patches)?;
        }
        data[skip * w..].copy_from_slice(patches.data());
        Tensor::new(vec![self.config.num_tokens(), w], data)
    }

    /// Runs the encoder on a preprocessed `[3 × S × S]` image, recording the
    /// patch tokens after the embedding and after every block.
    ///
    /// Hooks registered at layer `L` run, in list order, on layer `L`'s
    /// output before block `L + 1` consumes it; the recorded state at `L`
    /// is the post-hook state.
    pub fn forward_with_taps(
        &self,
        image: &Tensor,
        image_id: &str,
        hooks: &[InterventionHook],
    ) -> Result<HiddenStateStack> {
        let c = &self.config;
        if let Some(h) = hooks.iter().find(|h| h.layer > c.layers) {
            return Err(Error::Contract(format!(
                "hook at layer {} but the encoder records layers 0..={}",
                h.layer, c.layers
            )));
        }
        let skip = usize::from(c.class_token);
        let per_state = c.num_patches() * c.width;
        let mut record = Vec::with_capacity(c.num_states() * per_state);
        let at_layer = |l: usize| {
            move |e: Error| match e {
                Error::Numeric { location } => Error::Numeric {
                    location: format!("layer {l} ({location})"),
                },
                other => other,
            }
        };
        let mut x = self.embed(image).map_err(at_layer(0))?;
        x = self.apply_hooks(0, x, hooks).map_err(at_layer(0))?;
        record.extend_from_slice(&x.data()[skip * c.width..]);
        for (i, b) in self.blocks.iter().enumerate() {
            let l = i + 1;
            x = self.block(b, &x).map_err(at_layer(l))?;
            x = self.apply_hooks(l, x, hooks).map_err(at_layer(l))?;
            record.extend_from_slice(&x.data()[skip * c.width..]);
        }
        let values = Tensor::new(vec![c.num_states(), c.num_patches(), c.width], record)
            .map_err(at_layer(c.layers))?;
        Ok(HiddenStateStack {
            values,
            image_id: image_id.to_string(),
            init_kind: self.init_kind,
        })
    }
}

/// Convenience wrapper around [`Encoder::forward_with_taps`].
pub fn forward_with_taps(
    encoder: &Encoder,
    image: &Tensor,
    image_id: &str,
    hooks: &[InterventionHook],
) -> Result<HiddenStateStack> {
    encoder.forward_with_taps(image, image_id, hooks)
}
