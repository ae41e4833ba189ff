// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference oracle shared by the gradient tests.

use polysae::linalg::{randn_matrix, Rng};
use polysae::model::compute_decoder_norms;
use polysae::train::{backward_with_selection, loss_with_selection, select};
use polysae::{ModelConfig, PolySaeParams, Ranks, Sparsifier};

pub const H: f64 = 1e-4;

/// Worst per-tensor relative error `max|g − fd| / max(max|fd|, 1e-6)` of the
/// analytic gradient against central differences, selection held fixed.
pub fn gradient_check(config: &ModelConfig, seed: u64, through_norms: bool) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let mut params = PolySaeParams::init(config, &mut rng).unwrap();
    params.b_enc.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
    params.b_dec.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
    let batch = randn_matrix(&mut rng, 7, config.d);

    let sel = select(&params, config, &batch).unwrap();
    let (_, grads) = backward_with_selection(&params, config, &batch, &sel, through_norms).unwrap();

    let eval = |p: &PolySaeParams| {
        let norms = if through_norms {
            compute_decoder_norms(p)
        } else {
            sel.norms.clone()
        };
        loss_with_selection(p, config, &batch, &sel.support, &norms).unwrap()
    };

    let mut out = Vec::new();
    for (t, (name, g)) in grads.tensors().into_iter().enumerate() {
        let mut worst_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (i, &gi) in g.iter().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[t].1[i] += H;
            let mut minus = params.clone();
            minus.tensors_mut()[t].1[i] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst_diff = worst_diff.max((gi - fd).abs());
            scale = scale.max(fd.abs());
        }
        out.push((name, worst_diff / scale.max(1e-6)));
    }
    out
}

pub fn small(sparsifier: Sparsifier) -> ModelConfig {
    let mut c = ModelConfig::new(5, 11, 3, Ranks { r1: 5, r2: 3, r3: 2 }).with_sparsifier(sparsifier);
    if sparsifier == Sparsifier::Matryoshka {
        c.matryoshka_prefixes = vec![3, 6, 11];
    }
    c
}
