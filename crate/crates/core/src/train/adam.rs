// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::model::PolySaeParams;

use super::TrainConfig;

/// First and second Adam moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: PolySaeParams,
    pub v: PolySaeParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &PolySaeParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

pub fn global_norm(grads: &PolySaeParams) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut PolySaeParams, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Global-norm clipping followed by one bias-corrected Adam update.
/// `grads` is clipped in place. Returns the pre-clip gradient norm.
pub fn adam_step(
    params: &mut PolySaeParams,
    grads: &mut PolySaeParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> f64 {
    let norm = clip_global_norm(grads, config.grad_clip_max_norm);
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let eps = config.adam_eps;

    let params_t = params.tensors_mut();
    let grads_t = grads.tensors();
    let m_t = state.m.tensors_mut();
    let v_t = state.v.tensors_mut();
    for (((p, g), m), v) in params_t.into_iter().zip(grads_t).zip(m_t).zip(v_t) {
        for i in 0..p.1.len() {
            let gi = g.1[i];
            m.1[i] = b1 * m.1[i] + (1.0 - b1) * gi;
            v.1[i] = b2 * v.1[i] + (1.0 - b2) * gi * gi;
            let mhat = m.1[i] / bc1;
            let vhat = v.1[i] / bc2;
            p.1[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::model::{ModelConfig, Ranks};

    fn setup() -> (PolySaeParams, TrainConfig) {
        let c = ModelConfig::new(3, 5, 2, Ranks { r1: 3, r2: 2, r3: 1 });
        (
            PolySaeParams::init(&c, &mut Rng::new(1)).unwrap(),
            TrainConfig::default(),
        )
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut p, tc) = setup();
        let before = p.clone();
        let mut g = p.zeros_like();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &mut g, &mut st, &tc);
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let (p, _) = setup();
        let mut g = p.zeros_like();
        g.b_dec = vec![6.0, 8.0, 0.0];
        let pre = clip_global_norm(&mut g, 1.0);
        assert_eq!(pre, 10.0);
        assert!((g.b_dec[0] - 0.6).abs() < 1e-15 && (g.b_dec[1] - 0.8).abs() < 1e-15);
        assert!(global_norm(&g) <= 1.0 + 1e-12);

        let mut small = p.zeros_like();
        small.lambda2 = 0.5;
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.lambda2, 0.5);
    }

    #[test]
    fn first_step_closed_form() {
        let (mut p, tc) = setup();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.b_dec = vec![0.3, -0.2, 1e-3];
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &mut g, &mut st, &tc);
        for i in 0..3 {
            let gi = g.b_dec[i];
            let expected = before.b_dec[i] - tc.learning_rate * gi / (gi.abs() + tc.adam_eps);
            assert!((p.b_dec[i] - expected).abs() < 1e-15);
        }
    }
}
