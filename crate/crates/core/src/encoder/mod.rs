// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vision-transformer encoder: weights, preprocessing, and the tapped forward pass.

mod config;
mod model;
mod preprocess;
mod weights;

pub use config::{EncoderConfig, Normalization};
pub use model::{forward_with_taps, Encoder, HiddenStateStack, InitKind, InterventionHook};
pub use preprocess::{decode_image, preprocess, preprocess_image, preprocess_unit, read_image, RgbImage};
pub use weights::{
    infer_config, load_weights, random_init, required_tensors, validate_store, InitRule,
    NamedTensorStore, INIT_STD,
};
