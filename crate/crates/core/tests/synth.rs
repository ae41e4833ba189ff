// SPDX-License-Identifier: MIT OR Apache-2.0

use polysae::linalg::Rng;
use polysae::synth::{
    calibrate_interaction_energy, cooccurrence_rate, default_scenario, generate,
    interaction_energy_fraction, ScenarioConfig,
};

#[test]
fn calibrated_fraction_hits_target() {
    let gt = default_scenario(&ScenarioConfig::default()).unwrap();
    let cal = calibrate_interaction_energy(&gt, 0.3, &Rng::new(11)).unwrap();
    // measured on a fresh stream
    let measured = interaction_energy_fraction(&cal, 100_000, &Rng::new(12));
    assert!((measured - 0.3).abs() < 0.05, "measured {measured}");
}

#[test]
fn interacting_pairs_cofire_rarely() {
    let gt = default_scenario(&ScenarioConfig::default()).unwrap();
    let corpus = generate(&gt, 50_000, &mut Rng::new(3)).unwrap();
    let mean = |ps: Vec<(usize, usize)>| {
        ps.iter().map(|&(i, j)| cooccurrence_rate(&corpus, i, j)).sum::<f64>() / ps.len() as f64
    };
    let planted = mean(gt.pairs.iter().map(|p| (p.i, p.j)).collect());
    let boosted = mean(gt.cooccurrence_boost.iter().map(|c| (c.i, c.j)).collect());
    assert!(planted < 0.25 * boosted, "planted {planted} boosted {boosted}");
}
