// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain linear Top-K sparse autoencoder, written independently of the
//! polynomial model. Used as the comparison baseline and as the reduction
//! reference: a polynomial model with `λ2 = λ3 = 0` must train exactly like
//! the factored variant here.
//!
//! The decoder is either a dense `d × d_sae` dictionary `W`, or the factored
//! form `W = C1 Uᵀ` with orthonormal `U`. Gradients always go through the
//! materialized `W`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::mse_with;
use crate::linalg::{matmul, qr_positive, randn_matrix, Matrix, Rng};
use crate::model::{PolySaeParams, SparseCode, DECODER_NORM_FLOOR};
use crate::sparsify::topk_indices;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum LinearDecoder {
    Dense { w: Matrix },
    Factored { u: Matrix, c1: Matrix },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSae {
    pub enc: Matrix,
    pub b_enc: Vec<f64>,
    pub decoder: LinearDecoder,
    pub b_dec: Vec<f64>,
    pub k: usize,
}

impl LinearSae {
    /// Dense baseline with Gaussian encoder (`1/√d`) and unit-norm dictionary columns.
    pub fn init_dense(d: usize, d_sae: usize, k: usize, rng: &mut Rng) -> Self {
        let enc = randn_matrix(rng, d, d_sae).scale(1.0 / (d as f64).sqrt());
        let mut w = randn_matrix(rng, d, d_sae);
        for c in 0..d_sae {
            let n = w.col(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            for r in 0..d {
                w[(r, c)] /= n;
            }
        }
        Self {
            enc,
            b_enc: vec![0.0; d_sae],
            decoder: LinearDecoder::Dense { w },
            b_dec: vec![0.0; d],
            k,
        }
    }

    /// Factored copy of the linear part of a polynomial model.
    pub fn from_poly_linear_part(p: &PolySaeParams, k: usize) -> Self {
        Self {
            enc: p.enc.clone(),
            b_enc: p.b_enc.clone(),
            decoder: LinearDecoder::Factored {
                u: p.u.clone(),
                c1: p.c1.clone(),
            },
            b_dec: p.b_dec.clone(),
            k,
        }
    }

    pub fn d(&self) -> usize {
        self.enc.rows()
    }

    pub fn d_sae(&self) -> usize {
        self.enc.cols()
    }

    pub fn param_count(&self) -> usize {
        let dec = match &self.decoder {
            LinearDecoder::Dense { w } => w.as_slice().len(),
            LinearDecoder::Factored { u, c1 } => u.as_slice().len() + c1.as_slice().len(),
        };
        self.enc.as_slice().len() + self.b_enc.len() + dec + self.b_dec.len()
    }

    pub fn dictionary(&self) -> Matrix {
        match &self.decoder {
            LinearDecoder::Dense { w } => w.clone(),
            LinearDecoder::Factored { u, c1 } => matmul(c1, &u.transpose()).expect("factor shapes"),
        }
    }

    fn norms(w: &Matrix) -> Vec<f64> {
        (0..w.cols())
            .map(|c| {
                w.col(c)
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(DECODER_NORM_FLOOR)
            })
            .collect()
    }

    pub fn decoder_norms(&self) -> Vec<f64> {
        Self::norms(&self.dictionary())
    }

    /// Dense code for one row, plus the preactivation.
    fn encode_with(&self, x: &[f64], norms: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.d() {
            return Err(Error::shape("linear encode", format!("{} vs {}", x.len(), self.d())));
        }
        let h: Vec<f64> = (0..self.d_sae())
            .map(|i| self.b_enc[i] + (0..x.len()).map(|r| x[r] * self.enc[(r, i)]).sum::<f64>())
            .collect();
        let pre: Vec<f64> = h.iter().zip(norms).map(|(hi, n)| hi.max(0.0) * n).collect();
        let mut z = vec![0.0; pre.len()];
        for i in topk_indices(&pre, self.k)? {
            z[i] = pre[i];
        }
        Ok((z, h))
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_with(x, &self.decoder_norms())?.0)
    }

    /// Codes for every row, dictionary and norms computed once.
    pub fn encode_corpus(&self, corpus: &Matrix) -> Result<Vec<SparseCode>> {
        let norms = self.decoder_norms();
        (0..corpus.rows())
            .into_par_iter()
            .map(|r| Ok(SparseCode::from_dense(&self.encode_with(corpus.row(r), &norms)?.0)))
            .collect()
    }

    /// Mean over rows of `‖x̂ − x‖²`.
    pub fn mse(&self, corpus: &Matrix) -> Result<f64> {
        let w = self.dictionary();
        let norms = Self::norms(&w);
        mse_with(corpus, |x| {
            let (z, _) = self.encode_with(x, &norms)?;
            Ok(w.mul_vec(&z).iter().zip(&self.b_dec).map(|(a, b)| a + b).collect())
        })
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let w = self.dictionary();
        let wz = w.mul_vec(z);
        wz.iter().zip(&self.b_dec).map(|(a, b)| a + b).collect()
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode(&self.encode(x)?))
    }

    pub fn loss(&self, batch: &Matrix) -> Result<f64> {
        Ok(self.loss_and_grads(batch)?.0)
    }

    /// Loss and gradients, selection and norms held constant.
    pub fn loss_and_grads(&self, batch: &Matrix) -> Result<(f64, LinearGrads)> {
        let w = self.dictionary();
        let norms = Self::norms(&w);
        let n = batch.rows();
        let (d, d_sae) = (self.d(), self.d_sae());
        let mut g_w = Matrix::zeros(d, d_sae);
        let mut g = LinearGrads {
            enc: Matrix::zeros(d, d_sae),
            b_enc: vec![0.0; d_sae],
            w: Matrix::zeros(0, 0),
            u: None,
            c1: None,
            b_dec: vec![0.0; d],
        };
        let mut total = 0.0;
        for r in 0..n {
            let x = batch.row(r);
            let (z, h) = self.encode_with(x, &norms)?;
            let y = w.mul_vec(&z);
            let resid: Vec<f64> = (0..d).map(|c| y[c] + self.b_dec[c] - x[c]).collect();
            total += resid.iter().map(|v| v * v).sum::<f64>();
            let gy: Vec<f64> = resid.iter().map(|v| 2.0 * v / n as f64).collect();
            g.b_dec.iter_mut().zip(&gy).for_each(|(b, v)| *b += v);
            for i in (0..d_sae).filter(|&i| z[i] != 0.0) {
                let mut dz = 0.0;
                for c in 0..d {
                    g_w[(c, i)] += gy[c] * z[i];
                    dz += w[(c, i)] * gy[c];
                }
                if h[i] > 0.0 {
                    let dh = dz * norms[i];
                    g.b_enc[i] += dh;
                    for (c, xc) in x.iter().enumerate() {
                        g.enc[(c, i)] += xc * dh;
                    }
                }
            }
        }
        match &self.decoder {
            LinearDecoder::Dense { .. } => g.w = g_w,
            LinearDecoder::Factored { u, c1 } => {
                // W = C1 Uᵀ  ⇒  ∂C1 = ∂W U,  ∂U = ∂Wᵀ C1
                g.c1 = Some(matmul(&g_w, u)?);
                g.u = Some(matmul(&g_w.transpose(), c1)?);
            }
        }
        Ok((total / n as f64, g))
    }
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub enc: Matrix,
    pub b_enc: Vec<f64>,
    /// Dense dictionary gradient (empty for the factored decoder).
    pub w: Matrix,
    pub u: Option<Matrix>,
    pub c1: Option<Matrix>,
    pub b_dec: Vec<f64>,
}

impl LinearGrads {
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.enc.as_mut_slice(), &mut self.b_enc];
        match (&mut self.u, &mut self.c1) {
            (Some(u), Some(c1)) => {
                out.push(u.as_mut_slice());
                out.push(c1.as_mut_slice());
            }
            _ => out.push(self.w.as_mut_slice()),
        }
        out.push(&mut self.b_dec);
        out
    }
}

/// Adam state and loop for the baseline.
pub struct LinearTrainer {
    pub sae: LinearSae,
    config: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl LinearTrainer {
    pub fn new(sae: LinearSae, config: TrainConfig) -> Self {
        Self {
            sae,
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    fn param_slices(sae: &mut LinearSae) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![sae.enc.as_mut_slice(), &mut sae.b_enc];
        match &mut sae.decoder {
            LinearDecoder::Dense { w } => out.push(w.as_mut_slice()),
            LinearDecoder::Factored { u, c1 } => {
                out.push(u.as_mut_slice());
                out.push(c1.as_mut_slice());
            }
        }
        out.push(&mut sae.b_dec);
        out
    }

    /// One clipped Adam step (and retraction for the factored decoder).
    /// Returns the pre-update batch loss.
    pub fn step(&mut self, batch: &Matrix) -> Result<f64> {
        let (loss, mut grads) = self.sae.loss_and_grads(batch)?;
        let mut gs = grads.slices_mut();
        let norm = gs
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > self.config.grad_clip_max_norm {
            let s = self.config.grad_clip_max_norm / norm;
            for t in gs.iter_mut() {
                t.iter_mut().for_each(|g| *g *= s);
            }
        }
        if self.m.is_empty() {
            self.m = gs.iter().map(|s| vec![0.0; s.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.adam_beta1.powi(self.t);
        let bc2 = 1.0 - c.adam_beta2.powi(self.t);
        let params = Self::param_slices(&mut self.sae);
        for (k, (p, g)) in params.into_iter().zip(gs.iter()).enumerate() {
            for i in 0..p.len() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = c.adam_beta1 * *m + (1.0 - c.adam_beta1) * g[i];
                *v = c.adam_beta2 * *v + (1.0 - c.adam_beta2) * g[i] * g[i];
                p[i] -= c.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + c.adam_eps);
            }
        }
        if let LinearDecoder::Factored { u, .. } = &mut self.sae.decoder {
            *u = qr_positive(u)?.0;
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_init_has_unit_columns() {
        let sae = LinearSae::init_dense(4, 9, 2, &mut Rng::new(1));
        for n in sae.decoder_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(sae.param_count(), 2 * 4 * 9 + 4 + 9);
    }

    #[test]
    fn dense_training_reduces_loss() {
        let mut rng = Rng::new(3);
        let sae = LinearSae::init_dense(6, 12, 3, &mut rng);
        let batch = randn_matrix(&mut rng, 64, 6);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut tr = LinearTrainer::new(sae, cfg);
        let first = tr.step(&batch).unwrap();
        let mut last = first;
        for _ in 0..100 {
            last = tr.step(&batch).unwrap();
        }
        assert!(last < first, "{last} !< {first}");
    }
}
