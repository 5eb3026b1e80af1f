// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named tensor containers: safetensors IO, config inference, shape
//! validation, and seeded random initialization.
//!
//! Tensor names follow the Hugging Face `ViTModel` layout, so an exported
//! `google/vit-base-patch16-224-in21k` checkpoint loads directly. A leading
//! `vit.` prefix (classification heads) is stripped on load.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the truncated normal used for random weights.
pub const INIT_STD: f64 = 0.02;

/// Flat map from tensor names to tensors, plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensorStore {
    pub entries: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl NamedTensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::Load {
            tensor: name.to_string(),
            reason: "missing from container".into(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    /// Serializes as a safetensors buffer (all tensors F32, metadata in the
    /// `__metadata__` header).
    pub fn to_safetensors_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .entries
            .iter()
            .map(|(name, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), t.shape().to_vec(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, raw)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: Option<HashMap<String, String>> = if self.metadata.is_empty() {
            None
        } else {
            Some(self.metadata.clone().into_iter().collect())
        };
        safetensors::tensor::serialize(views, &meta)
            .map_err(|e| Error::Format(format!("safetensors serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_safetensors_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Parses a safetensors buffer without any encoder-specific validation.
    pub fn from_safetensors_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Format(format!("not a safetensors container: {e}")))?;
        let (_, header) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Format(format!("bad safetensors header: {e}")))?;
        let mut store = Self::new();
        if let Some(meta) = header.metadata() {
            store.metadata = meta.clone().into_iter().collect();
        }
        for (name, view) in st.tensors() {
            let values = decode_values(&name, view.dtype(), view.data())?;
            let shape = if view.shape().is_empty() {
                vec![1]
            } else {
                view.shape().to_vec()
            };
            let tensor = Tensor::new(shape, values).map_err(|e| Error::Load {
                tensor: name.clone(),
                reason: e.to_string(),
            })?;
            let key = name.strip_prefix("vit.").unwrap_or(&name).to_string();
            store.entries.insert(key, tensor);
        }
        Ok(store)
    }
}

fn decode_values(name: &str, dtype: Dtype, raw: &[u8]) -> Result<Vec<f32>> {
    let values = match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16))
            .collect(),
        other => {
            return Err(Error::Load {
                tensor: name.to_string(),
                reason: format!("unsupported dtype {other:?}"),
            })
        }
    };
    Ok(values)
}

/// How a tensor is filled by [`random_init`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    TruncatedNormal,
    Zeros,
    Ones,
}

/// Name, shape, and init rule of every tensor the encoder needs.
pub fn required_tensors(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, InitRule)> {
    use InitRule::*;
    let w = cfg.width;
    let p = cfg.patch_size;
    let i = cfg.intermediate();
    let mut specs = vec![
        (
            "embeddings.patch_embeddings.projection.weight".to_string(),
            vec![w, 3, p, p],
            TruncatedNormal,
        ),
        ("embeddings.patch_embeddings.projection.bias".to_string(), vec![w], Zeros),
        (
            "embeddings.position_embeddings".to_string(),
            vec![1, cfg.num_tokens(), w],
            TruncatedNormal,
        ),
    ];
    if cfg.class_token {
        specs.push(("embeddings.cls_token".to_string(), vec![1, 1, w], TruncatedNormal));
    }
    for l in 0..cfg.layers {
        let pre = format!("encoder.layer.{l}");
        let mut push = |suffix: &str, shape: Vec<usize>, rule| {
            specs.push((format!("{pre}.{suffix}"), shape, rule));
        };
        push("layernorm_before.weight", vec![w], Ones);
        push("layernorm_before.bias", vec![w], Zeros);
        for proj in ["query", "key", "value"] {
            push(&format!("attention.attention.{proj}.weight"), vec![w, w], TruncatedNormal);
            push(&format!("attention.attention.{proj}.bias"), vec![w], Zeros);
        }
        push("attention.output.dense.weight", vec![w, w], TruncatedNormal);
        push("attention.output.dense.bias", vec![w], Zeros);
        push("layernorm_after.weight", vec![w], Ones);
        push("layernorm_after.bias", vec![w], Zeros);
        push("intermediate.dense.weight", vec![i, w], TruncatedNormal);
        push("intermediate.dense.bias", vec![i], Zeros);
        push("output.dense.weight", vec![w, i], TruncatedNormal);
        push("output.dense.bias", vec![w], Zeros);
    }
    specs
}

/// Checks that every required tensor is present with the expected shape.
pub fn validate_store(store: &NamedTensorStore, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    for (name, shape, _) in required_tensors(cfg) {
        let t = store.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Load {
                tensor: name,
                reason: format!("shape {:?}, expected {shape:?}", t.shape()),
            });
        }
    }
    Ok(())
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str) -> Result<Option<usize>> {
    meta.get(key)
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("metadata `{key}` = `{v}` is not an integer")))
        })
        .transpose()
}

/// Resolves the encoder config from tensor shapes, overridden by metadata.
pub fn infer_config(store: &NamedTensorStore) -> Result<EncoderConfig> {
    let meta = &store.metadata;
    let proj_name = "embeddings.patch_embeddings.projection.weight";
    let proj = store.get(proj_name)?;
    let (width, patch) = match proj.shape() {
        [w, 3, p, q] if p == q => (*w, *p),
        s => {
            return Err(Error::Load {
                tensor: proj_name.into(),
                reason: format!("shape {s:?}, expected [width, 3, patch, patch]"),
            })
        }
    };
    let class_token = store.contains("embeddings.cls_token");
    let pos_name = "embeddings.position_embeddings";
    let tokens = match store.get(pos_name)?.shape() {
        [1, n, _] => *n,
        s => {
            return Err(Error::Load {
                tensor: pos_name.into(),
                reason: format!("shape {s:?}, expected [1, tokens, width]"),
            })
        }
    };
    let patches = tokens.saturating_sub(usize::from(class_token));
    let side = (patches as f64).sqrt().round() as usize;
    let mut layers = 0;
    while store.contains(&format!("encoder.layer.{layers}.layernorm_before.weight")) {
        layers += 1;
    }
    let intermediate = store
        .entries
        .get("encoder.layer.0.intermediate.dense.weight")
        .map(|t| t.shape()[0])
        .unwrap_or(width * 4);

    let width = meta_usize(meta, "hidden_size")?.unwrap_or(width);
    let intermediate = meta_usize(meta, "intermediate_size")?.unwrap_or(intermediate);
    let heads = match meta_usize(meta, "num_attention_heads")? {
        Some(h) => h,
        None if width % 64 == 0 => width / 64,
        None => {
            return Err(Error::Config(
                "num_attention_heads missing from metadata and width is not a multiple of 64"
                    .into(),
            ))
        }
    };
    let layer_norm_eps = match meta.get("layer_norm_eps") {
        Some(v) => v
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("layer_norm_eps `{v}` is not a float")))?,
        None => 1e-6,
    };
    if width == 0 || intermediate % width != 0 {
        return Err(Error::Config(format!(
            "intermediate size {intermediate} is not a multiple of width {width}"
        )));
    }
    let cfg = EncoderConfig {
        image_size: meta_usize(meta, "image_size")?.unwrap_or(side * patch),
        patch_size: meta_usize(meta, "patch_size")?.unwrap_or(patch),
        width,
        layers: meta_usize(meta, "num_hidden_layers")?.unwrap_or(layers),
        heads,
        mlp_ratio: intermediate / width,
        class_token,
        layer_norm_eps,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// JSON sidecar next to a container: `<stem>.json`, else `config.json`.
fn sidecar_path(path: &Path) -> Option<PathBuf> {
    let own = path.with_extension("json");
    if own.is_file() {
        return Some(own);
    }
    let shared = path.parent()?.join("config.json");
    shared.is_file().then_some(shared)
}

fn merge_sidecar(store: &mut NamedTensorStore, sidecar: &Path) -> Result<()> {
    let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Format(format!("{}: sidecar must be a JSON object", sidecar.display())))?;
    for (k, v) in obj {
        let s = match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        store.metadata.insert(k.clone(), s);
    }
    Ok(())
}

/// Reads a safetensors container (plus optional JSON sidecar) and validates
/// every encoder tensor against the inferred config.
pub fn load_weights(path: &Path) -> Result<NamedTensorStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut store = NamedTensorStore::from_safetensors_bytes(&bytes)?;
    if let Some(sidecar) = sidecar_path(path) {
        merge_sidecar(&mut store, &sidecar)?;
    }
    let cfg = infer_config(&store)?;
    validate_store(&store, &cfg)?;
    Ok(store)
}

/// Draws a fresh encoder: truncated-normal (±2σ, σ = 0.02) projections,
/// class token and position table; zero biases; unit layer-norm gains.
///
/// Tensors are filled in name order from one ChaCha stream, so the result
/// is a pure function of `(cfg, seed)`.
pub fn random_init(cfg: &EncoderConfig, seed: u64) -> Result<NamedTensorStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut specs = required_tensors(cfg);
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut store = NamedTensorStore::new();
    for (name, shape, rule) in specs {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match rule {
            InitRule::Zeros => vec![0.0; n],
            InitRule::Ones => vec![1.0; n],
            InitRule::TruncatedNormal => (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break v as f32;
                    }
                })
                .collect(),
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    store.metadata = cfg.to_metadata();
    store.metadata.insert("init".into(), "random".into());
    store.metadata.insert("seed".into(), seed.to_string());
    Ok(store)
}
