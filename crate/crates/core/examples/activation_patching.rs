// SPDX-License-Identifier: MIT OR Apache-2.0

//! Influence matrices for two tiny encoders. Identity blocks carry a patched
//! component unchanged to every later layer; random blocks transform it.

use std::collections::BTreeMap;

use vitprobe::encoder::{random_init, Encoder, InitKind};
use vitprobe::fixture::{identity_carry, planted_probes};
use vitprobe::interventions::{influence_matrix, InfluenceMatrix, PatchMode, PatchingSpec, DEFAULT_GUARD_EPSILON};

fn print(name: &str, m: &InfluenceMatrix, states: usize) {
    println!("{name} (rows L, columns T):");
    for l in 0..states {
        let row: Vec<String> = (0..states)
            .map(|t| m.effect(l, t).map_or("   -   ".into(), |e| format!("{e:>7.3}")))
            .collect();
        println!("  L{l}: {}", row.join(" "));
    }
}

fn main() -> vitprobe::Result<()> {
    let ic = identity_carry(0, 4)?;
    let identity = Encoder::from_store(&ic.store, InitKind::Pretrained)?;
    let cfg = identity.config().clone();
    let states = cfg.num_states();
    let spec = PatchingSpec {
        layers: (0..states).collect(),
        guard_epsilon: DEFAULT_GUARD_EPSILON,
        mode: PatchMode::AllPositions,
    };
    let m = influence_matrix(&identity, &ic.images, &ic.pairs, &ic.probes, &spec)?;
    print("identity blocks", &m, states);

    let random = Encoder::from_store(&random_init(&cfg, 9)?, InitKind::Random { seed: 9 })?;
    let (_, probes): (_, BTreeMap<_, _>) = planted_probes(cfg.width, cfg.layers, 0)?;
    let m = influence_matrix(&random, &ic.images, &ic.pairs, &probes, &spec)?;
    print("random blocks", &m, states);
    Ok(())
}
