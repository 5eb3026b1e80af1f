// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk cache of hidden-state stacks.
//!
//! Each stack is stored once as a little-endian `f32` blob named by its
//! SHA-256 (`blobs/<hex>.f32`, layout `[states × patches × width]`), and
//! `manifest.json` maps `(init, image_id)` to the blob, its shape and a digest
//! of the source image bytes. Layer slices are read with a seek, so a probe
//! run over one layer never loads whole stacks.

use std::collections::BTreeMap;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{preprocess_image, read_image, Encoder, HiddenStateStack, InitKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub image_id: String,
    pub init: InitKind,
    pub sha256: String,
    /// `[states, patches, width]`.
    pub shape: [usize; 3],
    /// SHA-256 of the image file the stack was computed from.
    pub source_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    /// Keyed by `"<init key>/<image_id>"`.
    entries: BTreeMap<String, CacheEntry>,
}

/// Content-addressed store of [`HiddenStateStack`]s.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
    manifest: Manifest,
}

fn entry_key(init: InitKind, image_id: &str) -> String {
    format!("{}/{image_id}", init.key())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl FeatureCache {
    /// Opens (or creates) the cache rooted at `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir.join("blobs")).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let manifest = if path.is_file() {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        } else {
            Manifest::default()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn blob_path(&self, sha: &str) -> PathBuf {
        self.dir.join("blobs").join(format!("{sha}.f32"))
    }

    pub fn entry(&self, init: InitKind, image_id: &str) -> Option<&CacheEntry> {
        self.manifest.entries.get(&entry_key(init, image_id))
    }

    pub fn contains(&self, init: InitKind, image_id: &str) -> bool {
        self.entry(init, image_id).is_some()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.manifest.entries.values()
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    /// Writes the blob for `stack` and records it. Call [`Self::flush`] to
    /// persist the manifest.
    pub fn put(&mut self, stack: &HiddenStateStack, source_sha256: &str) -> Result<()> {
        let bytes = to_le_bytes(stack.values.data());
        let sha = sha256_hex(&bytes);
        let path = self.blob_path(&sha);
        if !path.is_file() {
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        }
        let shape = [stack.num_states(), stack.num_patches(), stack.width()];
        self.manifest.entries.insert(
            entry_key(stack.init_kind, &stack.image_id),
            CacheEntry {
                image_id: stack.image_id.clone(),
                init: stack.init_kind,
                sha256: sha,
                shape,
                source_sha256: source_sha256.to_string(),
            },
        );
        Ok(())
    }

    /// Writes `manifest.json` through a temporary file.
    pub fn flush(&self) -> Result<()> {
        let path = self.dir.join("manifest.json");
        let tmp = self.dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn require(&self, init: InitKind, image_id: &str) -> Result<&CacheEntry> {
        self.entry(init, image_id).ok_or_else(|| {
            Error::Data(format!("feature cache has no stack for {image_id} ({init})"))
        })
    }

    pub fn get_stack(&self, init: InitKind, image_id: &str) -> Result<HiddenStateStack> {
        let e = self.require(init, image_id)?;
        let path = self.blob_path(&e.sha256);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let values = Tensor::new(e.shape.to_vec(), from_le_bytes(&bytes))
            .map_err(|err| Error::Data(format!("{}: {err}", path.display())))?;
        Ok(HiddenStateStack {
            values,
            image_id: image_id.to_string(),
            init_kind: init,
        })
    }

    /// `[patches × width]` activations of one layer, read without loading
    /// the rest of the stack.
    pub fn layer(&self, init: InitKind, image_id: &str, layer: usize) -> Result<Vec<f32>> {
        let e = self.require(init, image_id)?;
        let [states, patches, width] = e.shape;
        if layer >= states {
            return Err(Error::Data(format!(
                "feature cache stack for {image_id} ({init}) has {states} layers, layer {layer} requested"
            )));
        }
        let path = self.blob_path(&e.sha256);
        let n = patches * width;
        let mut f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        f.seek(SeekFrom::Start((layer * n * 4) as u64)).map_err(|e| Error::io(&path, e))?;
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
        Ok(from_le_bytes(&buf))
    }

    /// Re-hashes every blob; returns the keys whose contents do not match.
    pub fn verify(&self) -> Result<Vec<String>> {
        let bad: Vec<String> = self
            .manifest
            .entries
            .par_iter()
            .filter(|(_, e)| {
                std::fs::read(self.blob_path(&e.sha256))
                    .map(|b| sha256_hex(&b) != e.sha256)
                    .unwrap_or(true)
            })
            .map(|(k, _)| k.clone())
            .collect();
        Ok(bad)
    }
}

/// Outcome of an extraction pass.
#[derive(Debug, Default)]
pub struct ExtractReport {
    pub computed: usize,
    pub skipped: usize,
    /// Images that failed, with the error. Other images are still cached.
    pub failures: Vec<(PathBuf, Error)>,
}

const EXTRACT_BATCH: usize = 16;

/// Runs `encoder` over every `(image_id, path)` and caches the stacks,
/// skipping entries already cached from identical image bytes.
pub fn extract(
    encoder: &Encoder,
    images: &[(String, PathBuf)],
    cache: &mut FeatureCache,
) -> Result<ExtractReport> {
    let init = encoder.init_kind();
    let mut report = ExtractReport::default();
    for batch in images.chunks(EXTRACT_BATCH) {
        let results: Vec<(PathBuf, Result<Option<(HiddenStateStack, String)>>)> = batch
            .par_iter()
            .map(|(id, path)| {
                let run = || -> Result<Option<(HiddenStateStack, String)>> {
                    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                    let digest = sha256_hex(&bytes);
                    if cache.entry(init, id).is_some_and(|e| e.source_sha256 == digest) {
                        return Ok(None);
                    }
                    let img = read_image(path)?;
                    let x = preprocess_image(&img, encoder.config().image_size, encoder.normalization())?;
                    let stack = encoder.forward_with_taps(&x, id, &[])?;
                    Ok(Some((stack, digest)))
                };
                (path.clone(), run())
            })
            .collect();
        for (path, r) in results {
            match r {
                Ok(None) => report.skipped += 1,
                Ok(Some((stack, digest))) => {
                    cache.put(&stack, &digest)?;
                    report.computed += 1;
                }
                Err(e) => {
                    log::warn!("extraction failed for {}: {e}", path.display());
                    report.failures.push((path, e));
                }
            }
        }
        cache.flush()?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{random_init, EncoderConfig};

    fn stack(id: &str, seed: f32) -> HiddenStateStack {
        let values: Vec<f32> = (0..3 * 4 * 5).map(|i| i as f32 * seed).collect();
        HiddenStateStack {
            values: Tensor::new(vec![3, 4, 5], values).unwrap(),
            image_id: id.into(),
            init_kind: InitKind::Random { seed: 7 },
        }
    }

    #[test]
    fn put_get_and_layer_slices() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = FeatureCache::open(dir.path()).unwrap();
        let s = stack("a", 0.5);
        cache.put(&s, "src").unwrap();
        cache.flush().unwrap();
        let cache = FeatureCache::open(dir.path()).unwrap();
        let init = InitKind::Random { seed: 7 };
        assert_eq!(cache.get_stack(init, "a").unwrap(), s);
        assert_eq!(cache.layer(init, "a", 2).unwrap(), s.layer(2));
        assert!(matches!(cache.layer(init, "a", 3), Err(Error::Data(_))));
        assert!(matches!(cache.layer(InitKind::Pretrained, "a", 0), Err(Error::Data(_))));
        assert!(cache.verify().unwrap().is_empty());
    }

    #[test]
    fn verify_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = FeatureCache::open(dir.path()).unwrap();
        cache.put(&stack("a", 1.0), "x").unwrap();
        cache.put(&stack("b", 2.0), "y").unwrap();
        let sha = cache.entry(InitKind::Random { seed: 7 }, "b").unwrap().sha256.clone();
        std::fs::write(cache.blob_path(&sha), b"oops").unwrap();
        assert_eq!(cache.verify().unwrap(), vec!["random-7/b".to_string()]);
    }

    #[test]
    fn extraction_is_idempotent_and_isolates_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let img_dir = dir.path().join("img");
        std::fs::create_dir_all(&img_dir).unwrap();
        let mut images = Vec::new();
        for i in 0..3u8 {
            let p = img_dir.join(format!("{i}.png"));
            image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([x as u8 * 30, y as u8 * 30, i * 60]))
                .save(&p)
                .unwrap();
            images.push((format!("im{i}"), p));
        }
        let bad = img_dir.join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        images.push(("bad".into(), bad.clone()));

        let cfg = EncoderConfig::tiny();
        let enc = Encoder::from_store(&random_init(&cfg, 3).unwrap(), InitKind::Random { seed: 3 }).unwrap();
        let mut cache = FeatureCache::open(&dir.path().join("cache")).unwrap();
        let first = extract(&enc, &images, &mut cache).unwrap();
        assert_eq!((first.computed, first.skipped), (3, 0));
        assert_eq!(first.failures.len(), 1);
        assert_eq!(first.failures[0].0, bad);
        assert!(first.failures[0].1.to_string().contains("bad.png"));
        let manifest = std::fs::read(dir.path().join("cache/manifest.json")).unwrap();

        let mut cache = FeatureCache::open(&dir.path().join("cache")).unwrap();
        let second = extract(&enc, &images[..3], &mut cache).unwrap();
        assert_eq!((second.computed, second.skipped), (0, 3));
        assert_eq!(std::fs::read(dir.path().join("cache/manifest.json")).unwrap(), manifest);
    }
}
