// SPDX-License-Identifier: MIT OR Apache-2.0

//! Records every layer's patch states, then reruns with a hook that zeroes
//! one direction at layer 1 and shows how far the change travels.
//!
//! ```text
//! cargo run --example encoder_taps [weights.safetensors]
//! ```

use vitprobe::encoder::{load_weights, random_init, Encoder, EncoderConfig, InitKind, InterventionHook};
use vitprobe::interventions::{ablate_direction, DirectionSpec};
use vitprobe::tensor::Tensor;

fn main() -> vitprobe::Result<()> {
    let store = match std::env::args().nth(1) {
        Some(path) => load_weights(path.as_ref())?,
        None => random_init(&EncoderConfig::tiny(), 0)?,
    };
    let enc = Encoder::from_store(&store, InitKind::Pretrained)?;
    let c = enc.config().clone();
    let s = c.image_size;
    let pixels: Vec<f32> = (0..3 * s * s).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let image = Tensor::new(vec![3, s, s], pixels)?;

    let clean = enc.forward_with_taps(&image, "demo", &[])?;
    println!("stack shape {:?} (layers + 1, patches, width)", clean.values.shape());

    let dir = DirectionSpec::random(1, c.width, 42);
    let hook_dir = dir.clone();
    let hook = InterventionHook::new(1, move |h| ablate_direction(h, &hook_dir, 1.0));
    let ablated = enc.forward_with_taps(&image, "demo", &[hook])?;

    for l in 0..c.num_states() {
        let (a, b) = (clean.layer(l), ablated.layer(l));
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
        let along: f64 = b
            .chunks(c.width)
            .map(|row| vitprobe::tensor::dot_mixed(row, &dir.unit_vector).abs())
            .fold(0.0, f64::max);
        println!("layer {l:>2}: ‖Δ‖ = {diff:.4e}   max |h·ŵ| after hook = {along:.3e}");
    }
    Ok(())
}
