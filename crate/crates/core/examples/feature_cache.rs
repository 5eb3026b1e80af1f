// SPDX-License-Identifier: MIT OR Apache-2.0

//! Extracts hidden-state stacks for a folder of images into the
//! content-addressed cache, reruns (everything is skipped), and verifies
//! every blob against its checksum.

use std::path::PathBuf;

use vitprobe::cache::{extract, FeatureCache};
use vitprobe::encoder::{load_weights, Encoder, InitKind};
use vitprobe::fixture::{make_fixture, FixtureKind};

fn main() -> vitprobe::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| vitprobe::Error::Data(e.to_string()))?;
    make_fixture(FixtureKind::TinyEncoder, 0, dir.path())?;
    let enc = Encoder::from_store(&load_weights(&dir.path().join("weights/tiny.safetensors"))?, InitKind::Pretrained)?;

    let folder = dir.path().join("data/nyu/images/test");
    let mut images: Vec<(String, PathBuf)> = std::fs::read_dir(&folder)
        .map_err(|e| vitprobe::Error::Data(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    images.sort();

    let mut cache = FeatureCache::open(&dir.path().join("cache"))?;
    for pass in 1..=2 {
        let r = extract(&enc, &images, &mut cache)?;
        println!("pass {pass}: {} computed, {} skipped, {} failed", r.computed, r.skipped, r.failures.len());
    }
    let (id, _) = &images[0];
    let layer = cache.layer(InitKind::Pretrained, id, 2)?;
    println!("{id}: layer 2 holds {} values, first {:?}", layer.len(), &layer[..4]);
    println!("corrupt entries: {:?}", cache.verify()?);
    Ok(())
}
