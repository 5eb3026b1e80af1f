// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-patch targets from raw annotations: majority-vote boundaries and
//! mean depth, on a 32×32 scene mapped to a 16×16 model input.

use vitprobe::labels::{
    boundary_patch_labels, consensus_boundaries, depth_patch_labels, BinaryMap, BoundaryAnnotationSet, DepthMap,
    LabelConfig, PatchGrid, TieRule,
};

fn show(name: &str, grid: &PatchGrid, v: &[f32]) {
    println!("{name}:");
    for row in v.chunks(grid.side()) {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.2}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn main() -> vitprobe::Result<()> {
    let grid = PatchGrid { image_size: 16, patch_size: 4 };
    let n = 32;

    // Four annotators trace a vertical edge, split evenly between two columns.
    let annotations = [12, 12, 20, 20]
        .iter()
        .map(|&col| {
            let mut m = BinaryMap::zeros(n, n);
            for y in 0..n {
                m.set(y, col, true);
            }
            m
        })
        .collect();
    let set = BoundaryAnnotationSet { image_id: "edge".into(), annotations };
    // Without dilation the 1-pixel edge falls between the sampled columns.
    for (tie_rule, dilation) in [(TieRule::Strict, 1), (TieRule::AtLeastHalf, 1), (TieRule::AtLeastHalf, 0)] {
        let cfg = LabelConfig { tie_rule, dilation, ..LabelConfig::default() };
        let labels = boundary_patch_labels(&consensus_boundaries(&set, grid.image_size, &cfg)?, &grid)?;
        let v: Vec<f32> = labels.into_iter().map(f32::from).collect();
        show(&format!("boundary ({tie_rule:?}, dilation {dilation})"), &grid, &v);
    }

    // Depth rising from 1 m at the bottom to 9 m at the top, with a hole.
    let values: Vec<f32> = (0..n * n)
        .map(|i| {
            let (y, x) = (i / n, i % n);
            if (4..10).contains(&y) && (4..10).contains(&x) {
                0.0
            } else {
                1.0 + 8.0 * (n - 1 - y) as f32 / (n - 1) as f32
            }
        })
        .collect();
    let depth = DepthMap::from_meters("ramp", n, n, values)?;
    show("depth / 10 m", &grid, &depth_patch_labels(&depth, &grid, &LabelConfig::default())?);
    Ok(())
}
