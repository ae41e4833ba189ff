// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training: gradients, Adam with global-norm clipping, and the loop that
//! retracts `U` back onto the Stiefel manifold after every update.

mod adam;
mod grad;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{qr_positive, Matrix, Rng};
use crate::model::{Gradients, ModelConfig, PolySaeParams};

pub use adam::{adam_step, clip_global_norm, global_norm, OptimizerState};
pub use grad::{backward, backward_with_selection, loss, loss_with_selection, select, Selection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_max_norm: f64,
    /// Rows (tokens) per step.
    pub batch_size: usize,
    pub total_tokens: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Hold `λ2 = λ3` at their current values (the linear SAE reduction).
    pub freeze_lambdas: bool,
    /// Differentiate through the decoder-norm rescaling.
    pub grad_through_norms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_max_norm: 1.0,
            batch_size: 4096,
            total_tokens: 4096 * 1000,
            checkpoint_every: 100,
            seed: 0,
            freeze_lambdas: false,
            grad_through_norms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("grad_clip_max_norm", self.grad_clip_max_norm),
        ];
        for (name, v) in positive {
            // a zero learning rate is allowed: it freezes training
            if !(v >= 0.0 && v.is_finite()) || (name != "learning_rate" && v == 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size and checkpoint_every must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.total_tokens.div_ceil(self.batch_size as u64)
    }
}

/// Replaces `U` by the Q factor of its positive QR decomposition.
pub fn retract_u(params: &mut PolySaeParams) -> Result<()> {
    let (q, _) = qr_positive(&params.u)?;
    params.u = q;
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub ortho_residual: f64,
    pub wall_ms: u64,
}

/// What one optimizer step observed.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    /// Batch loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    /// `‖UᵀU − I‖_max` after the retraction.
    pub ortho_residual: f64,
}

/// Owns parameters and optimizer state for the duration of training.
pub struct Trainer {
    pub params: PolySaeParams,
    pub state: OptimizerState,
    pub model: ModelConfig,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(params: PolySaeParams, model: ModelConfig, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        params.check_shapes(&model)?;
        let state = OptimizerState::new(&params);
        Ok(Self {
            params,
            state,
            model,
            config,
        })
    }

    /// Norms, encode, decode, loss, backward, Adam, retraction.
    pub fn step(&mut self, batch: &Matrix) -> Result<StepStats> {
        let (loss, mut grads) = backward(
            &self.params,
            &self.model,
            batch,
            self.config.grad_through_norms,
        )?;
        if self.config.freeze_lambdas {
            grads.lambda2 = 0.0;
            grads.lambda3 = 0.0;
        }
        let grad_norm = adam_step(&mut self.params, &mut grads, &mut self.state, &self.config);
        retract_u(&mut self.params)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after step {}",
                self.state.step
            )));
        }
        Ok(StepStats {
            step: self.state.step,
            loss,
            grad_norm,
            ortho_residual: self.params.orthonormality_residual(),
        })
    }
}

/// Cycles through a corpus in fixed-size batches, reshuffling row order
/// every epoch from a seeded stream.
pub struct BatchStream<'a> {
    corpus: &'a Matrix,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    rng: Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(corpus: &'a Matrix, batch_size: usize, seed: u64) -> Self {
        let rng = Rng::new(seed);
        let mut s = Self {
            corpus,
            batch_size,
            order: (0..corpus.rows()).collect(),
            cursor: 0,
            epoch: 0,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut r = self.rng.derive(self.epoch);
        r.shuffle(&mut self.order);
    }

    pub fn next_batch(&mut self) -> Matrix {
        let d = self.corpus.cols();
        let mut data = Vec::with_capacity(self.batch_size * d);
        for _ in 0..self.batch_size {
            if self.cursor == self.order.len() {
                self.cursor = 0;
                self.epoch += 1;
                self.reshuffle();
            }
            data.extend_from_slice(self.corpus.row(self.order[self.cursor]));
            self.cursor += 1;
        }
        Matrix::from_vec(self.batch_size, d, data).expect("batch shape")
    }
}

pub struct TrainOutcome {
    pub params: PolySaeParams,
    pub state: OptimizerState,
    pub log: Vec<TrainRecord>,
}

/// Runs the full loop over `corpus`. `on_checkpoint` is called with the
/// trainer every `checkpoint_every` steps and after the last one.
pub fn train_with(
    params: PolySaeParams,
    model: &ModelConfig,
    config: &TrainConfig,
    corpus: &Matrix,
    mut on_checkpoint: impl FnMut(&Trainer, &TrainRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if corpus.cols() != model.d {
        return Err(Error::shape(
            "train",
            format!("corpus has d = {}, model d = {}", corpus.cols(), model.d),
        ));
    }
    if corpus.rows() == 0 {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut trainer = Trainer::new(params, model.clone(), config.clone())?;
    let mut stream = BatchStream::new(corpus, config.batch_size, config.seed);
    let started = Instant::now();
    let mut log = Vec::new();
    let mut last_good = 0;
    let steps = config.total_steps();
    for _ in 0..steps {
        let batch = stream.next_batch();
        let stats = trainer.step(&batch).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!(
                "{what}; last good checkpoint at step {last_good}"
            )),
            other => other,
        })?;
        if stats.step % config.checkpoint_every == 0 || stats.step == steps {
            let rec = TrainRecord {
                step: stats.step,
                loss: stats.loss,
                lambda2: trainer.params.lambda2,
                lambda3: trainer.params.lambda3,
                ortho_residual: stats.ortho_residual,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            on_checkpoint(&trainer, &rec)?;
            last_good = stats.step;
            log.push(rec);
        }
    }
    Ok(TrainOutcome {
        params: trainer.params,
        state: trainer.state,
        log,
    })
}

pub fn train(
    params: PolySaeParams,
    model: &ModelConfig,
    config: &TrainConfig,
    corpus: &Matrix,
) -> Result<TrainOutcome> {
    train_with(params, model, config, corpus, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::randn_matrix;
    use crate::model::Ranks;

    fn small() -> (ModelConfig, PolySaeParams, Matrix) {
        let c = ModelConfig::new(5, 11, 3, Ranks { r1: 5, r2: 3, r3: 2 });
        let p = PolySaeParams::init(&c, &mut Rng::new(1)).unwrap();
        let corpus = randn_matrix(&mut Rng::new(2), 64, 5);
        (c, p, corpus)
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let (c, p, corpus) = small();
        let tc = TrainConfig {
            learning_rate: 0.0,
            batch_size: 16,
            total_tokens: 16 * 20,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        let out = train(p.clone(), &c, &tc, &corpus).unwrap();
        // QR of an already positive-QR factor reproduces it to rounding
        assert!(out.params.u.sub(&p.u).unwrap().max_abs() < 1e-12);
        assert_eq!(out.params.enc, p.enc);
        assert_eq!(out.params.c2, p.c2);
        assert_eq!(out.log.len(), 20);
        assert!(out.log.iter().all(|r| r.lambda2 == -0.5));
    }

    #[test]
    fn frozen_lambdas_stay_put() {
        let (c, mut p, corpus) = small();
        p.lambda2 = 0.0;
        p.lambda3 = 0.0;
        let tc = TrainConfig {
            batch_size: 16,
            total_tokens: 16 * 10,
            freeze_lambdas: true,
            ..TrainConfig::default()
        };
        let out = train(p, &c, &tc, &corpus).unwrap();
        assert_eq!((out.params.lambda2, out.params.lambda3), (0.0, 0.0));
    }

    #[test]
    fn retraction_examples() {
        let (_, p, _) = small();
        let mut same = p.clone();
        retract_u(&mut same).unwrap();
        assert!(same.u.sub(&p.u).unwrap().max_abs() < 1e-12);

        let mut raw = p.clone();
        raw.u = randn_matrix(&mut Rng::new(7), 11, 5);
        let mut scaled = raw.clone();
        scaled.u = raw.u.scale(5.0);
        retract_u(&mut raw).unwrap();
        retract_u(&mut scaled).unwrap();
        assert!(raw.u.sub(&scaled.u).unwrap().max_abs() < 1e-12);
        assert!(raw.orthonormality_residual() < 1e-10);
        assert_eq!(raw.enc, p.enc);
    }

    #[test]
    fn batch_stream_is_seeded_and_covers_epochs() {
        let corpus = Matrix::from_fn(10, 1, |r, _| r as f64);
        let mut a = BatchStream::new(&corpus, 5, 3);
        let mut b = BatchStream::new(&corpus, 5, 3);
        let mut seen = Vec::new();
        for _ in 0..2 {
            let x = a.next_batch();
            assert_eq!(x, b.next_batch());
            seen.extend(x.into_vec());
        }
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            adam_beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(
            TrainConfig {
                batch_size: 10,
                total_tokens: 95,
                ..TrainConfig::default()
            }
            .total_steps(),
            10
        );
    }
}
