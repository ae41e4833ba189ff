// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loss and reverse-mode gradients for encode → sparsify → polynomial decode.
//!
//! Conventions: the loss is the mean over rows of `‖x̂ − x‖²` (Matryoshka:
//! the mean of that over prefixes); the sparsifier's selection is a constant
//! mask; ReLU has zero slope at 0; decoder norms are constants unless
//! `through_norms` is set.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    compute_decoder_norms, decode_projected, encode_batch, ModelConfig, PolySaeParams,
    DECODER_NORM_FLOOR,
};
use crate::sparsify::Sparsifier;

use super::Gradients;

/// Rows per parallel work unit. Partial results are reduced in chunk order,
/// so the result does not depend on the thread count.
const CHUNK_ROWS: usize = 128;

/// Frozen outcome of the ranking step for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub norms: Vec<f64>,
    /// Selected latent indices per row, ascending.
    pub support: Vec<Vec<usize>>,
}

/// Runs encoder ranking for a batch and records norms and supports.
pub fn select(params: &PolySaeParams, config: &ModelConfig, batch: &Matrix) -> Result<Selection> {
    check_batch(params, batch)?;
    let norms = compute_decoder_norms(params);
    let support = if config.sparsifier == Sparsifier::BatchTopK {
        encode_batch(params, config, batch, &norms)?
            .into_iter()
            .map(|c| c.entries.into_iter().map(|e| e.0).collect())
            .collect()
    } else {
        (0..batch.rows())
            .into_par_iter()
            .map(|r| {
                crate::model::encode(params, config, batch.row(r), &norms)
                    .map(|c| c.entries.into_iter().map(|e| e.0).collect())
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Selection { norms, support })
}

fn check_batch(params: &PolySaeParams, batch: &Matrix) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if batch.cols() != params.d() {
        return Err(Error::shape(
            "loss",
            format!("batch has d = {}, model d = {}", batch.cols(), params.d()),
        ));
    }
    if !batch.is_finite() {
        return Err(Error::NonFinite("activation batch".into()));
    }
    Ok(())
}

fn prefixes(config: &ModelConfig, d_sae: usize) -> Vec<usize> {
    if config.sparsifier == Sparsifier::Matryoshka {
        config.matryoshka_prefixes.clone()
    } else {
        vec![d_sae]
    }
}

pub fn loss(params: &PolySaeParams, config: &ModelConfig, batch: &Matrix) -> Result<f64> {
    let sel = select(params, config, batch)?;
    loss_with_selection(params, config, batch, &sel.support, &sel.norms)
}

/// Loss with the selection held fixed: kept latents are `ReLU(h_i)·norms_i`
/// evaluated at the current parameters.
pub fn loss_with_selection(
    params: &PolySaeParams,
    config: &ModelConfig,
    batch: &Matrix,
    support: &[Vec<usize>],
    norms: &[f64],
) -> Result<f64> {
    check_batch(params, batch)?;
    let pre = prefixes(config, params.d_sae());
    let n = batch.rows();
    let total: f64 = (0..n)
        .map(|r| {
            let x = batch.row(r);
            let z = kept_values(params, x, &support[r], norms);
            pre.iter()
                .map(|&p| {
                    let mut a = vec![0.0; params.u.cols()];
                    for (&i, &(_, zi)) in support[r].iter().zip(&z) {
                        if i < p {
                            axpy(&mut a, zi, params.u.row(i));
                        }
                    }
                    let y = decode_projected(params, &a);
                    y.iter()
                        .zip(&params.b_dec)
                        .zip(x)
                        .map(|((yi, b), xi)| (yi + b - xi).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / pre.len() as f64
        })
        .sum();
    let l = total / n as f64;
    if !l.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(l)
}

/// `(h_i, z_i)` for each selected latent.
fn kept_values(params: &PolySaeParams, x: &[f64], support: &[usize], norms: &[f64]) -> Vec<(f64, f64)> {
    support
        .iter()
        .map(|&i| {
            let mut h = params.b_enc[i];
            for (r, &xr) in x.iter().enumerate() {
                h += xr * params.enc[(r, i)];
            }
            (h, h.max(0.0) * norms[i])
        })
        .collect()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backpropagates `g = ∂L/∂(decoder output)` through the decoder at
/// projected code `a`, accumulating into `C*` and `λ*`; returns `∂L/∂a`.
fn decoder_backward(params: &PolySaeParams, a: &[f64], g: &[f64], grads: &mut Gradients) -> Vec<f64> {
    let r1 = a.len();
    let r2 = params.c2.cols();
    let r3 = params.c3.cols();
    let sq: Vec<f64> = a[..r2].iter().map(|v| v * v).collect();
    let cube: Vec<f64> = a[..r3].iter().map(|v| v * v * v).collect();
    let (l2, l3) = (params.lambda2, params.lambda3);

    let mut da = vec![0.0; r1];
    let mut g2 = vec![0.0; r2];
    let mut g3 = vec![0.0; r3];
    for (row, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let c1 = params.c1.row(row);
        axpy(&mut da, gr, c1);
        axpy(grads.c1.row_mut(row), gr, a);

        let c2 = params.c2.row(row);
        grads.lambda2 += gr * dot(c2, &sq);
        axpy(grads.c2.row_mut(row), l2 * gr, &sq);
        axpy(&mut g2, gr, c2);

        let c3 = params.c3.row(row);
        grads.lambda3 += gr * dot(c3, &cube);
        axpy(grads.c3.row_mut(row), l3 * gr, &cube);
        axpy(&mut g3, gr, c3);
    }
    for k in 0..r2 {
        da[k] += 2.0 * l2 * a[k] * g2[k];
    }
    for k in 0..r3 {
        da[k] += 3.0 * l3 * a[k] * a[k] * g3[k];
    }
    da
}

struct Partial {
    loss: f64,
    grads: Gradients,
    norm_grads: Vec<f64>,
}

fn chunk_backward(
    params: &PolySaeParams,
    batch: &Matrix,
    rows: std::ops::Range<usize>,
    sel: &Selection,
    pre: &[usize],
    n_total: usize,
) -> Partial {
    let mut grads = params.zeros_like();
    let mut norm_grads = vec![0.0; params.d_sae()];
    let mut loss = 0.0;
    let scale = 1.0 / (n_total as f64 * pre.len() as f64);

    for r in rows {
        let x = batch.row(r);
        let support = &sel.support[r];
        let kept = kept_values(params, x, support, &sel.norms);
        let mut dz = vec![0.0; support.len()];

        for &p in pre {
            let mut a = vec![0.0; params.u.cols()];
            for (&i, &(_, zi)) in support.iter().zip(&kept) {
                if i < p {
                    axpy(&mut a, zi, params.u.row(i));
                }
            }
            let y = decode_projected(params, &a);
            let resid: Vec<f64> = (0..x.len()).map(|c| y[c] + params.b_dec[c] - x[c]).collect();
            loss += resid.iter().map(|v| v * v).sum::<f64>() * scale;

            let g: Vec<f64> = resid.iter().map(|v| 2.0 * v * scale).collect();
            axpy(&mut grads.b_dec, 1.0, &g);
            let da = decoder_backward(params, &a, &g, &mut grads);
            for (s, (&i, &(_, zi))) in support.iter().zip(&kept).enumerate() {
                if i < p {
                    axpy(grads.u.row_mut(i), zi, &da);
                    dz[s] += dot(params.u.row(i), &da);
                }
            }
        }

        for (s, &i) in support.iter().enumerate() {
            let (h, _) = kept[s];
            if h > 0.0 {
                norm_grads[i] += dz[s] * h;
                let dh = dz[s] * sel.norms[i];
                grads.b_enc[i] += dh;
                for (c, &xc) in x.iter().enumerate() {
                    grads.enc[(c, i)] += xc * dh;
                }
            }
        }
    }
    Partial {
        loss,
        grads,
        norm_grads,
    }
}

fn add_into(acc: &mut Gradients, part: &Gradients) {
    for ((_, a), (_, p)) in acc.tensors_mut().into_iter().zip(part.tensors()) {
        for (x, y) in a.iter_mut().zip(p) {
            *x += y;
        }
    }
}

/// Loss and gradients with the selection computed from `params`.
pub fn backward(
    params: &PolySaeParams,
    config: &ModelConfig,
    batch: &Matrix,
    through_norms: bool,
) -> Result<(f64, Gradients)> {
    let sel = select(params, config, batch)?;
    backward_with_selection(params, config, batch, &sel, through_norms)
}

pub fn backward_with_selection(
    params: &PolySaeParams,
    config: &ModelConfig,
    batch: &Matrix,
    sel: &Selection,
    through_norms: bool,
) -> Result<(f64, Gradients)> {
    check_batch(params, batch)?;
    let n = batch.rows();
    let pre = prefixes(config, params.d_sae());
    let chunks: Vec<_> = (0..n)
        .step_by(CHUNK_ROWS)
        .map(|s| s..(s + CHUNK_ROWS).min(n))
        .collect();
    let partials: Vec<Partial> = chunks
        .into_par_iter()
        .map(|rows| chunk_backward(params, batch, rows, sel, &pre, n))
        .collect();

    let mut grads = params.zeros_like();
    let mut norm_grads = vec![0.0; params.d_sae()];
    let mut loss = 0.0;
    for p in &partials {
        loss += p.loss;
        add_into(&mut grads, &p.grads);
        axpy(&mut norm_grads, 1.0, &p.norm_grads);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    if through_norms {
        for (i, &gn) in norm_grads.iter().enumerate() {
            if gn == 0.0 {
                continue;
            }
            let ui = params.u.row(i);
            let v = decode_projected(params, ui);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= DECODER_NORM_FLOOR {
                continue;
            }
            let gv: Vec<f64> = v.iter().map(|x| gn * x / norm).collect();
            let da = decoder_backward(params, ui, &gv, &mut grads);
            axpy(grads.u.row_mut(i), 1.0, &da);
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::model::{Ranks, SparseCode};

    #[test]
    fn unit_offset_gives_unit_loss() {
        // identity model with b_dec = e_1 reconstructs x + e_1
        let config = ModelConfig::new(3, 3, 3, Ranks { r1: 3, r2: 1, r3: 1 });
        let mut p = PolySaeParams::zeros(&config);
        p.enc = Matrix::identity(3);
        p.u = Matrix::identity(3);
        p.c1 = Matrix::identity(3);
        p.b_dec = vec![1.0, 0.0, 0.0];
        let batch = Matrix::from_rows(&[&[0.5, 1.0, 2.0], &[3.0, 0.25, 1.0]]);
        assert!((loss(&p, &config, &batch).unwrap() - 1.0).abs() < 1e-15);
        p.b_dec = vec![0.0; 3];
        assert_eq!(loss(&p, &config, &batch).unwrap(), 0.0);
    }

    #[test]
    fn zero_batch_bias_gradient() {
        let config = ModelConfig::new(3, 4, 2, Ranks { r1: 3, r2: 2, r3: 1 });
        let mut p = PolySaeParams::init(&config, &mut Rng::new(2)).unwrap();
        p.b_dec = vec![0.5, -1.0, 2.0];
        let batch = Matrix::zeros(4, 3);
        let (l, g) = backward(&p, &config, &batch, false).unwrap();
        // x = 0 gives h = 0, so every code is empty
        assert!((l - (0.25 + 1.0 + 4.0)).abs() < 1e-12);
        for (gb, b) in g.b_dec.iter().zip(&p.b_dec) {
            assert!((gb - 2.0 * b).abs() < 1e-12);
        }
        assert_eq!(g.enc.max_abs(), 0.0);
    }

    #[test]
    fn single_prefix_matryoshka_matches_plain() {
        let base = ModelConfig::new(4, 6, 2, Ranks { r1: 4, r2: 2, r3: 1 });
        let mut mat = base.clone().with_sparsifier(Sparsifier::Matryoshka);
        mat.matryoshka_prefixes = vec![6];
        let p = PolySaeParams::init(&base, &mut Rng::new(8)).unwrap();
        let batch = crate::linalg::randn_matrix(&mut Rng::new(1), 5, 4);
        assert_eq!(
            loss(&p, &base, &batch).unwrap(),
            loss(&p, &mat, &batch).unwrap()
        );
    }

    #[test]
    fn loss_matches_decode() {
        let config = ModelConfig::new(4, 6, 2, Ranks { r1: 4, r2: 2, r3: 1 });
        let p = PolySaeParams::init(&config, &mut Rng::new(3)).unwrap();
        let batch = crate::linalg::randn_matrix(&mut Rng::new(4), 3, 4);
        let norms = compute_decoder_norms(&p);
        let mut expected = 0.0;
        for r in 0..3 {
            let z: SparseCode = crate::model::encode(&p, &config, batch.row(r), &norms).unwrap();
            let y = crate::model::decode(&p, &z).unwrap();
            expected += y.iter().zip(batch.row(r)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        expected /= 3.0;
        assert!((loss(&p, &config, &batch).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_batches() {
        let config = ModelConfig::new(3, 4, 2, Ranks { r1: 3, r2: 2, r3: 1 });
        let p = PolySaeParams::init(&config, &mut Rng::new(2)).unwrap();
        assert!(loss(&p, &config, &Matrix::zeros(0, 3)).is_err());
        assert!(loss(&p, &config, &Matrix::zeros(2, 4)).is_err());
        let mut bad = Matrix::zeros(2, 3);
        bad[(1, 1)] = f64::INFINITY;
        assert!(matches!(loss(&p, &config, &bad), Err(Error::NonFinite(_))));
    }
}
