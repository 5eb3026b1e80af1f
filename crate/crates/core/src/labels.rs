// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-patch targets: consensus boundary flags and normalized mean depths,
//! dataset split discovery, and the on-disk label cache.
//!
//! Dataset layout (both datasets share it):
//!
//! ```text
//! <root>/images/{train,val,test}/<id>.{png,jpg}
//! <root>/groundTruth/{split}/<id>/<annotator>.png   # boundary: one binary PNG per annotator
//! <root>/depth/{split}/<id>.png                      # depth: 16-bit PNG, 0 = invalid
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::resample;

/// Which property a probe predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Boundary,
    Depth,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Boundary => "boundary",
            Task::Depth => "depth",
        }
    }

    /// Published `(train, val, test)` image counts.
    pub fn expected_splits(&self) -> SplitSummary {
        match self {
            Task::Boundary => SplitSummary { train: 200, val: 100, test: 200 },
            Task::Depth => SplitSummary { train: 675, val: 120, test: 654 },
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boundary" => Ok(Task::Boundary),
            "depth" => Ok(Task::Depth),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Square patch tiling of a square model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn vit_b16() -> Self {
        Self { image_size: 224, patch_size: 16 }
    }

    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.side() * self.side()
    }
}

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "binary map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    /// Square dilation with the given radius (Chebyshev distance).
    pub fn dilate(&self, radius: usize) -> BinaryMap {
        if radius == 0 {
            return self.clone();
        }
        let mut out = BinaryMap::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                for yy in y.saturating_sub(radius)..=(y + radius).min(self.height - 1) {
                    for xx in x.saturating_sub(radius)..=(x + radius).min(self.width - 1) {
                        out.set(yy, xx, true);
                    }
                }
            }
        }
        out
    }
}

/// Every annotator's contour map for one image.
#[derive(Debug, Clone)]
pub struct BoundaryAnnotationSet {
    pub image_id: String,
    pub annotations: Vec<BinaryMap>,
}

/// Metric depth with a validity mask.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Treats zero and non-finite readings as invalid.
    pub fn from_meters(image_id: &str, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "depth map {height}x{width} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| *v < 0.0) {
            return Err(Error::Data(format!("{image_id}: negative depth")));
        }
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(Self {
            image_id: image_id.to_string(),
            height,
            width,
            values,
            valid,
        })
    }
}

/// How an even split among annotators is resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    /// A pixel needs strictly more than half of the annotators.
    #[default]
    Strict,
    /// Half of the annotators is enough.
    AtLeastHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// Dilation radius applied to each annotation before resampling.
    pub dilation: usize,
    pub tie_rule: TieRule,
    /// Depth (metres) that maps to label 1.0.
    pub depth_max_m: f32,
    /// Raw 16-bit depth PNG units per metre.
    pub depth_png_per_m: f32,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            dilation: 1,
            tie_rule: TieRule::Strict,
            depth_max_m: 10.0,
            depth_png_per_m: 1000.0,
        }
    }
}

/// Majority vote over annotations dilated by `cfg.dilation` and then
/// resampled (nearest neighbor) to `size × size`.
pub fn consensus_boundaries(
    anns: &BoundaryAnnotationSet,
    size: usize,
    cfg: &LabelConfig,
) -> Result<BinaryMap> {
    let first = anns
        .annotations
        .first()
        .ok_or_else(|| Error::Data(format!("{}: no annotations", anns.image_id)))?;
    if anns
        .annotations
        .iter()
        .any(|a| (a.height, a.width) != (first.height, first.width))
    {
        return Err(Error::Dimension(format!(
            "{}: annotations differ in resolution",
            anns.image_id
        )));
    }
    let n = anns.annotations.len();
    let mut votes = vec![0usize; size * size];
    for a in &anns.annotations {
        // Dilating first keeps a contour alive through downsampling whose
        // stride is below 2·dilation + 1.
        let thick = a.dilate(cfg.dilation);
        let map = BinaryMap::new(size, size, resample::nearest(&thick.data, a.height, a.width, size, size))?;
        for (v, &on) in votes.iter_mut().zip(&map.data) {
            *v += usize::from(on);
        }
    }
    let data = votes
        .iter()
        .map(|&v| match cfg.tie_rule {
            TieRule::Strict => 2 * v > n,
            TieRule::AtLeastHalf => 2 * v >= n,
        })
        .collect();
    BinaryMap::new(size, size, data)
}

/// A patch is positive iff any pixel inside it is set. Patches are ordered
/// row-major, matching the encoder's token order.
pub fn boundary_patch_labels(consensus: &BinaryMap, grid: &PatchGrid) -> Result<Vec<u8>> {
    let s = grid.image_size;
    if (consensus.height, consensus.width) != (s, s) {
        return Err(Error::Dimension(format!(
            "consensus map is {}x{}, expected {s}x{s}",
            consensus.height, consensus.width
        )));
    }
    let p = grid.patch_size;
    let g = grid.side();
    let mut labels = vec![0u8; g * g];
    for y in 0..s {
        for x in 0..s {
            if consensus.get(y, x) {
                labels[(y / p) * g + x / p] = 1;
            }
        }
    }
    Ok(labels)
}

/// Bilinear resize to model resolution (ignoring invalid pixels), mean per
/// patch, divide by `depth_max_m`, clamp to `[0, 1]`. Patches without a
/// valid pixel copy the label of the nearest patch that has one.
pub fn depth_patch_labels(depth: &DepthMap, grid: &PatchGrid, cfg: &LabelConfig) -> Result<Vec<f32>> {
    if !depth.valid.iter().any(|&v| v) {
        return Err(Error::Data(format!("{}: no valid depth pixel", depth.image_id)));
    }
    let s = grid.image_size;
    let (vals, valid) =
        resample::bilinear_masked(&depth.values, &depth.valid, depth.height, depth.width, s, s);
    let p = grid.patch_size;
    let g = grid.side();
    let mut sums = vec![0.0f64; g * g];
    let mut counts = vec![0usize; g * g];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            if valid[i] {
                let k = (y / p) * g + x / p;
                sums[k] += vals[i] as f64;
                counts[k] += 1;
            }
        }
    }
    let scale = cfg.depth_max_m as f64;
    let direct: Vec<Option<f32>> = sums
        .iter()
        .zip(&counts)
        .map(|(&sum, &c)| (c > 0).then(|| (sum / c as f64 / scale).clamp(0.0, 1.0) as f32))
        .collect();
    let filled = (0..g * g)
        .map(|k| {
            direct[k].unwrap_or_else(|| {
                let (ky, kx) = ((k / g) as i64, (k % g) as i64);
                let nearest = (0..g * g)
                    .filter(|&j| direct[j].is_some())
                    .min_by_key(|&j| {
                        let (dy, dx) = ((j / g) as i64 - ky, (j % g) as i64 - kx);
                        (dy * dy + dx * dx, j)
                    })
                    .expect("at least one valid patch");
                direct[nearest].expect("filtered")
            })
        })
        .collect();
    Ok(filled)
}

/// Targets for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLabelSet {
    pub image_id: String,
    pub task: Task,
    /// `{0, 1}` for boundaries, `[0, 1]` for depth.
    pub labels: Vec<f32>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSummary {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// One image with its split and target files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub image_id: String,
    pub split: Split,
    pub image_path: PathBuf,
    /// Annotator PNGs for boundaries; the single depth PNG for depth.
    pub target_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub task: Task,
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn summary(&self) -> SplitSummary {
        let mut s = SplitSummary::default();
        for e in &self.entries {
            match e.split {
                Split::Train => s.train += 1,
                Split::Val => s.val += 1,
                Split::Test => s.test += 1,
            }
        }
        s
    }
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Indexes a dataset root. When `images/val` is absent and `carve_val` is
/// set, the last `carve_val` training ids (sorted) become the validation
/// split. Count mismatches against the published splits are logged.
pub fn assign_splits(task: Task, root: &Path, carve_val: Option<usize>) -> Result<DatasetIndex> {
    let images = root.join("images");
    let mut entries = Vec::new();
    for split in Split::ALL {
        let dir = images.join(split.as_str());
        if !dir.is_dir() {
            continue;
        }
        for path in sorted_dir(&dir)?.into_iter().filter(|p| is_image(p)) {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Data(format!("bad file name {}", path.display())))?
                .to_string();
            let target_paths = match task {
                Task::Boundary => {
                    let gt = root.join("groundTruth").join(split.as_str()).join(&id);
                    if gt.is_dir() {
                        sorted_dir(&gt)?.into_iter().filter(|p| is_image(p)).collect()
                    } else {
                        Vec::new()
                    }
                }
                Task::Depth => {
                    let d = root.join("depth").join(split.as_str()).join(format!("{id}.png"));
                    if d.is_file() {
                        vec![d]
                    } else {
                        Vec::new()
                    }
                }
            };
            if target_paths.is_empty() {
                return Err(Error::Data(format!("{}: no targets for image `{id}`", root.display())));
            }
            entries.push(DatasetEntry {
                image_id: id,
                split,
                image_path: path,
                target_paths,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: no images found", root.display())));
    }
    let mut ids: Vec<&str> = entries.iter().map(|e| e.image_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Data(format!("duplicate image id `{}`", w[0])));
    }
    if let Some(n) = carve_val {
        if !images.join("val").is_dir() {
            let train: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].split == Split::Train).collect();
            for &i in train.iter().rev().take(n) {
                entries[i].split = Split::Val;
            }
        }
    }
    let index = DatasetIndex {
        task,
        root: root.to_path_buf(),
        entries,
    };
    let observed = index.summary();
    let expected = task.expected_splits();
    if observed != expected {
        log::warn!(
            "{task} split counts {}/{}/{} differ from the published {}/{}/{}",
            observed.train,
            observed.val,
            observed.test,
            expected.train,
            expected.val,
            expected.test
        );
    }
    Ok(index)
}

fn read_gray(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads one annotator PNG: any nonzero pixel is a contour.
pub fn read_annotation(path: &Path) -> Result<BinaryMap> {
    let img = read_gray(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMap::new(h, w, img.into_raw().into_iter().map(|v| v > 0).collect())
}

/// Reads a 16-bit depth PNG, converting raw units to metres.
pub fn read_depth_png(path: &Path, image_id: &str, cfg: &LabelConfig) -> Result<DepthMap> {
    let img = read_gray(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img.into_raw().into_iter().map(|v| v as f32 / cfg.depth_png_per_m).collect();
    DepthMap::from_meters(image_id, h, w, values)
}

/// Computes the targets for one dataset entry.
pub fn label_entry(
    task: Task,
    entry: &DatasetEntry,
    grid: &PatchGrid,
    cfg: &LabelConfig,
) -> Result<PatchLabelSet> {
    let labels = match task {
        Task::Boundary => {
            let annotations = entry
                .target_paths
                .iter()
                .map(|p| read_annotation(p))
                .collect::<Result<Vec<_>>>()?;
            let set = BoundaryAnnotationSet {
                image_id: entry.image_id.clone(),
                annotations,
            };
            let consensus = consensus_boundaries(&set, grid.image_size, cfg)?;
            boundary_patch_labels(&consensus, grid)?.into_iter().map(f32::from).collect()
        }
        Task::Depth => {
            let depth = read_depth_png(&entry.target_paths[0], &entry.image_id, cfg)?;
            depth_patch_labels(&depth, grid, cfg)?
        }
    };
    Ok(PatchLabelSet {
        image_id: entry.image_id.clone(),
        task,
        labels,
        split: entry.split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelCacheEntry {
    image_id: String,
    split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelCacheManifest {
    task: Task,
    num_patches: usize,
    dtype: String,
    sha256: String,
    entries: Vec<LabelCacheEntry>,
}

/// Every image's targets for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCache {
    pub task: Task,
    pub num_patches: usize,
    pub sets: Vec<PatchLabelSet>,
}

impl LabelCache {
    pub fn new(task: Task, num_patches: usize, mut sets: Vec<PatchLabelSet>) -> Result<Self> {
        sets.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        for s in &sets {
            if s.labels.len() != num_patches || s.task != task {
                return Err(Error::Data(format!(
                    "{}: {} {} labels, expected {num_patches} {task}",
                    s.image_id,
                    s.labels.len(),
                    s.task
                )));
            }
            let ok = match task {
                Task::Boundary => s.labels.iter().all(|&v| v == 0.0 || v == 1.0),
                Task::Depth => s.labels.iter().all(|&v| (0.0..=1.0).contains(&v)),
            };
            if !ok {
                return Err(Error::Data(format!("{}: label outside valid range", s.image_id)));
            }
        }
        Ok(Self { task, num_patches, sets })
    }

    pub fn get(&self, image_id: &str) -> Option<&PatchLabelSet> {
        self.sets
            .binary_search_by(|s| s.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.sets[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatchLabelSet> {
        self.sets.iter().filter(move |s| s.split == split)
    }

    fn paths(dir: &Path, task: Task) -> (PathBuf, PathBuf) {
        (
            dir.join(format!("{}.bin", task.as_str())),
            dir.join(format!("{}.json", task.as_str())),
        )
    }

    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.sets {
            match self.task {
                Task::Boundary => out.extend(s.labels.iter().map(|&v| v as u8)),
                Task::Depth => out.extend(s.labels.iter().flat_map(|v| v.to_le_bytes())),
            }
        }
        out
    }

    /// Writes `<task>.bin` (u8 boundary flags or LE f32 depths) and the
    /// `<task>.json` manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = self.blob();
        let manifest = LabelCacheManifest {
            task: self.task,
            num_patches: self.num_patches,
            dtype: match self.task {
                Task::Boundary => "u8".into(),
                Task::Depth => "f32".into(),
            },
            sha256: hex::encode(Sha256::digest(&blob)),
            entries: self
                .sets
                .iter()
                .map(|s| LabelCacheEntry {
                    image_id: s.image_id.clone(),
                    split: s.split,
                })
                .collect(),
        };
        let (bin, json) = Self::paths(dir, self.task);
        std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        std::fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json, e))
    }

    pub fn exists(dir: &Path, task: Task) -> bool {
        let (bin, json) = Self::paths(dir, task);
        bin.is_file() && json.is_file()
    }

    pub fn read(dir: &Path, task: Task) -> Result<Self> {
        let (bin, json) = Self::paths(dir, task);
        let text = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: LabelCacheManifest = serde_json::from_slice(&text)?;
        let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if hex::encode(Sha256::digest(&blob)) != manifest.sha256 {
            return Err(Error::Data(format!("{}: checksum mismatch", bin.display())));
        }
        let width = if task == Task::Boundary { 1 } else { 4 };
        let per = manifest.num_patches * width;
        if blob.len() != per * manifest.entries.len() {
            return Err(Error::Data(format!("{}: truncated label blob", bin.display())));
        }
        let sets = manifest
            .entries
            .iter()
            .zip(blob.chunks(per))
            .map(|(e, chunk)| PatchLabelSet {
                image_id: e.image_id.clone(),
                task,
                split: e.split,
                labels: match task {
                    Task::Boundary => chunk.iter().map(|&b| b as f32).collect(),
                    Task::Depth => chunk
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                },
            })
            .collect();
        Self::new(task, manifest.num_patches, sets)
    }
}
