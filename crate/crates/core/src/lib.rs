// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probing and intervening on the patch representations of a ViT encoder.
//!
//! The crate runs a frozen encoder over images, caches every layer's patch
//! states, trains linear and MLP probes for boundary and depth targets at
//! each layer, and then tests whether the learned depth directions are used
//! by the network: directional ablation with random controls, graded
//! ablation, and targeted activation patching between images.
//!
//! Each capability is usable on its own; see `examples/` for one runnable
//! program per module. [`pipeline`] ties the stages together behind a TOML
//! config, and the `vitprobe` binary exposes them as subcommands.

pub mod cache;
pub mod encoder;
pub mod error;
pub mod fixture;
pub mod grid;
pub mod interventions;
pub mod labels;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod resample;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
