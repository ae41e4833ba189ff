// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite differences against the analytic backward pass.

mod common;

use common::{gradient_check, small};
use polysae::linalg::{randn_matrix, Rng};
use polysae::train::{backward_with_selection, select};
use polysae::{PolySaeParams, Sparsifier};

#[test]
fn topk_gradients_match_finite_differences() {
    for seed in 0..5 {
        for (name, err) in gradient_check(&small(Sparsifier::TopK), seed, false) {
            assert!(err < 1e-4, "seed {seed} tensor {name}: rel err {err:e}");
        }
    }
}

#[test]
fn batch_topk_and_matryoshka_gradients() {
    for s in [Sparsifier::BatchTopK, Sparsifier::Matryoshka] {
        for seed in 0..3 {
            for (name, err) in gradient_check(&small(s), seed, false) {
                assert!(err < 1e-4, "{s:?} seed {seed} tensor {name}: rel err {err:e}");
            }
        }
    }
}

#[test]
fn gradients_through_decoder_norms() {
    for seed in 0..3 {
        for (name, err) in gradient_check(&small(Sparsifier::TopK), seed, true) {
            assert!(err < 1e-4, "seed {seed} tensor {name}: rel err {err:e}");
        }
    }
}

#[test]
fn lambda_gradient_is_live_at_zero() {
    let config = small(Sparsifier::TopK);
    let mut rng = Rng::new(4);
    let mut params = PolySaeParams::init(&config, &mut rng).unwrap();
    params.lambda2 = 0.0;
    params.lambda3 = 0.0;
    let batch = randn_matrix(&mut rng, 6, 5);
    let sel = select(&params, &config, &batch).unwrap();
    let (_, g) = backward_with_selection(&params, &config, &batch, &sel, false).unwrap();
    // C2/C3 are multiplied by λ = 0, λ itself is not
    assert_eq!(g.c2.max_abs(), 0.0);
    assert_eq!(g.c3.max_abs(), 0.0);
    assert!(g.lambda2.abs() > 0.0 && g.lambda3.abs() > 0.0);
}
