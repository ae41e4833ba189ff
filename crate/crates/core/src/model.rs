// SPDX-License-Identifier: MIT OR Apache-2.0

//! Polynomial sparse autoencoder: linear Top-K style encoder and a decoder
//! with linear, quadratic and cubic terms routed through one shared
//! orthonormal projection `U`.
//!
//! For a sparse code `z` the decoder computes
//!
//! ```text
//! a   = z U                       (length R1)
//! out = b_dec + C1 a + λ2 C2 (a[..R2])² + λ3 C3 (a[..R3])³
//! ```
//!
//! where powers are elementwise. The quadratic and cubic branches reuse the
//! leading columns of `U`, so their subspaces are nested inside the linear one.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{qr_positive, randn_matrix, Matrix, Rng};
use crate::sparsify::{self, Sparsifier};

/// Floor applied to decoder norms so dead features still rank and rescale.
pub const DECODER_NORM_FLOOR: f64 = 1e-8;

/// Default cap on `d_sae` for materializing the pair/triple dictionaries.
pub const DEFAULT_MATERIALIZE_CAP: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranks {
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_sae: usize,
    pub k: usize,
    pub ranks: Ranks,
    pub sparsifier: Sparsifier,
    /// Ascending latent counts ending at `d_sae`; only read for Matryoshka.
    pub matryoshka_prefixes: Vec<usize>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(d: usize, d_sae: usize, k: usize, ranks: Ranks) -> Self {
        Self {
            d,
            d_sae,
            k,
            ranks,
            sparsifier: Sparsifier::TopK,
            matryoshka_prefixes: sparsify::default_matryoshka_prefixes(d_sae),
            seed: 0,
        }
    }

    pub fn with_sparsifier(mut self, sparsifier: Sparsifier) -> Self {
        self.sparsifier = sparsifier;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let Ranks { r1, r2, r3 } = self.ranks;
        if self.d == 0 || self.d_sae == 0 {
            return Err(Error::Config("d and d_sae must be positive".into()));
        }
        if !(0 < r3 && r3 <= r2 && r2 <= r1 && r1 <= self.d_sae) {
            return Err(Error::Config(format!(
                "ranks must satisfy 0 < r3 <= r2 <= r1 <= d_sae, got ({r1}, {r2}, {r3}) with d_sae = {}",
                self.d_sae
            )));
        }
        if self.k == 0 || self.k > self.d_sae {
            return Err(Error::Config(format!(
                "k must be in 1..={}, got {}",
                self.d_sae, self.k
            )));
        }
        if self.sparsifier == Sparsifier::Matryoshka {
            let p = &self.matryoshka_prefixes;
            if p.is_empty()
                || p.windows(2).any(|w| w[0] >= w[1])
                || p[0] == 0
                || *p.last().unwrap() != self.d_sae
            {
                return Err(Error::Config(format!(
                    "matryoshka prefixes must be strictly ascending, positive and end at d_sae = {}, got {p:?}",
                    self.d_sae
                )));
            }
        }
        Ok(())
    }
}

/// Every learnable tensor of the model. The same container holds gradients
/// and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct PolySaeParams {
    /// Encoder, `d × d_sae`.
    pub enc: Matrix,
    pub b_enc: Vec<f64>,
    /// Shared projection, `d_sae × R1`, orthonormal columns.
    pub u: Matrix,
    /// `d × R1`
    pub c1: Matrix,
    /// `d × R2`
    pub c2: Matrix,
    /// `d × R3`
    pub c3: Matrix,
    pub b_dec: Vec<f64>,
    pub lambda2: f64,
    pub lambda3: f64,
}

pub type Gradients = PolySaeParams;

/// Tensor names in canonical (checkpoint) order.
pub const TENSOR_NAMES: [&str; 9] = [
    "E", "b_enc", "U", "C1", "C2", "C3", "b_dec", "lambda2", "lambda3",
];

impl PolySaeParams {
    /// Random initialization: `U` from a positive QR of a Gaussian matrix,
    /// `λ2 = −0.5`, `λ3 = 0.5`, Gaussian `E` and `C*` scaled by the inverse
    /// square root of their fan-in, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let ModelConfig { d, d_sae, .. } = *config;
        let Ranks { r1, r2, r3 } = config.ranks;
        let (u, _) = qr_positive(&randn_matrix(rng, d_sae, r1))?;
        let enc = randn_matrix(rng, d, d_sae).scale(1.0 / (d as f64).sqrt());
        let c1 = randn_matrix(rng, d, r1).scale(1.0 / (r1 as f64).sqrt());
        let c2 = randn_matrix(rng, d, r2).scale(1.0 / (r2 as f64).sqrt());
        let c3 = randn_matrix(rng, d, r3).scale(1.0 / (r3 as f64).sqrt());
        Ok(Self {
            enc,
            b_enc: vec![0.0; d_sae],
            u,
            c1,
            c2,
            c3,
            b_dec: vec![0.0; d],
            lambda2: -0.5,
            lambda3: 0.5,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let ModelConfig { d, d_sae, .. } = *config;
        let Ranks { r1, r2, r3 } = config.ranks;
        Self {
            enc: Matrix::zeros(d, d_sae),
            b_enc: vec![0.0; d_sae],
            u: Matrix::zeros(d_sae, r1),
            c1: Matrix::zeros(d, r1),
            c2: Matrix::zeros(d, r2),
            c3: Matrix::zeros(d, r3),
            b_dec: vec![0.0; d],
            lambda2: 0.0,
            lambda3: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            enc: Matrix::zeros(self.enc.rows(), self.enc.cols()),
            b_enc: vec![0.0; self.b_enc.len()],
            u: Matrix::zeros(self.u.rows(), self.u.cols()),
            c1: Matrix::zeros(self.c1.rows(), self.c1.cols()),
            c2: Matrix::zeros(self.c2.rows(), self.c2.cols()),
            c3: Matrix::zeros(self.c3.rows(), self.c3.cols()),
            b_dec: vec![0.0; self.b_dec.len()],
            lambda2: 0.0,
            lambda3: 0.0,
        }
    }

    pub fn d(&self) -> usize {
        self.enc.rows()
    }

    pub fn d_sae(&self) -> usize {
        self.enc.cols()
    }

    pub fn ranks(&self) -> Ranks {
        Ranks {
            r1: self.u.cols(),
            r2: self.c2.cols(),
            r3: self.c3.cols(),
        }
    }

    /// Named flat views in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 9] {
        [
            ("E", self.enc.as_slice()),
            ("b_enc", &self.b_enc),
            ("U", self.u.as_slice()),
            ("C1", self.c1.as_slice()),
            ("C2", self.c2.as_slice()),
            ("C3", self.c3.as_slice()),
            ("b_dec", &self.b_dec),
            ("lambda2", std::slice::from_ref(&self.lambda2)),
            ("lambda3", std::slice::from_ref(&self.lambda3)),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 9] {
        [
            ("E", self.enc.as_mut_slice()),
            ("b_enc", &mut self.b_enc),
            ("U", self.u.as_mut_slice()),
            ("C1", self.c1.as_mut_slice()),
            ("C2", self.c2.as_mut_slice()),
            ("C3", self.c3.as_mut_slice()),
            ("b_dec", &mut self.b_dec),
            ("lambda2", std::slice::from_mut(&mut self.lambda2)),
            ("lambda3", std::slice::from_mut(&mut self.lambda3)),
        ]
    }

    /// Shapes as `(rows, cols)` in [`TENSOR_NAMES`] order; vectors are `(len, 1)`
    /// and scalars `(1, 1)`.
    pub fn shapes(&self) -> [(usize, usize); 9] {
        [
            self.enc.shape(),
            (self.b_enc.len(), 1),
            self.u.shape(),
            self.c1.shape(),
            self.c2.shape(),
            self.c3.shape(),
            (self.b_dec.len(), 1),
            (1, 1),
            (1, 1),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn orthonormality_residual(&self) -> f64 {
        self.u.orthonormality_residual()
    }

    /// Checks tensor shapes against a config.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config).shapes();
        for ((name, got), want) in TENSOR_NAMES.iter().zip(self.shapes()).zip(expected) {
            if got != want {
                return Err(Error::shape(
                    "params",
                    format!("tensor {name} has shape {got:?}, config implies {want:?}"),
                ));
            }
        }
        Ok(())
    }
}

/// Sparse latent code: ascending `(index, value)` pairs with positive values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseCode {
    pub len: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseCode {
    pub fn from_dense(values: &[f64]) -> Self {
        Self {
            len: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.entries
            .binary_search_by_key(&i, |e| e.0)
            .map_or(0.0, |p| self.entries[p].1)
    }

    /// Keeps only indices below `prefix`.
    pub fn prefix(&self, prefix: usize) -> SparseCode {
        SparseCode {
            len: self.len,
            entries: self.entries.iter().copied().filter(|e| e.0 < prefix).collect(),
        }
    }
}

/// `h = Eᵀx + b_enc`.
pub fn encoder_preactivation(params: &PolySaeParams, x: &[f64]) -> Vec<f64> {
    let mut h = params.b_enc.clone();
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        for (hi, &e) in h.iter_mut().zip(params.enc.row(r)) {
            *hi += xr * e;
        }
    }
    h
}

/// `ReLU(h) ∘ norms`, the quantity every sparsifier ranks.
pub fn pre_code(params: &PolySaeParams, x: &[f64], decoder_norms: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.d() {
        return Err(Error::shape(
            "encode",
            format!("input has length {}, model d = {}", x.len(), params.d()),
        ));
    }
    if decoder_norms.len() != params.d_sae() {
        return Err(Error::shape(
            "encode",
            format!("{} decoder norms for d_sae = {}", decoder_norms.len(), params.d_sae()),
        ));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input coordinate {i}")));
    }
    if let Some(i) = decoder_norms.iter().position(|n| n.is_nan() || *n <= 0.0) {
        return Err(Error::ZeroDecoderNorm(i));
    }
    let h = encoder_preactivation(params, x);
    Ok(h
        .iter()
        .zip(decoder_norms)
        .map(|(&hi, &n)| hi.max(0.0) * n)
        .collect())
}

/// Per-token encode. BatchTopK has no single-vector form, so it falls back
/// to per-token Top-K here; Matryoshka codes are plain Top-K codes.
pub fn encode(
    params: &PolySaeParams,
    config: &ModelConfig,
    x: &[f64],
    decoder_norms: &[f64],
) -> Result<SparseCode> {
    let p = pre_code(params, x, decoder_norms)?;
    let keep = sparsify::topk_indices(&p, config.k)?;
    Ok(SparseCode {
        len: p.len(),
        entries: keep.into_iter().map(|i| (i, p[i])).collect(),
    })
}

/// Encodes a batch of rows. BatchTopK selects `n·k` entries across the whole
/// batch; the other sparsifiers work row by row.
pub fn encode_batch(
    params: &PolySaeParams,
    config: &ModelConfig,
    batch: &Matrix,
    decoder_norms: &[f64],
) -> Result<Vec<SparseCode>> {
    match config.sparsifier {
        Sparsifier::BatchTopK => {
            let d_sae = params.d_sae();
            let mut pre = Matrix::zeros(batch.rows(), d_sae);
            for r in 0..batch.rows() {
                let p = pre_code(params, batch.row(r), decoder_norms)?;
                pre.row_mut(r).copy_from_slice(&p);
            }
            let mut codes = vec![
                SparseCode {
                    len: d_sae,
                    entries: Vec::new()
                };
                batch.rows()
            ];
            let flat = pre.as_slice();
            for idx in sparsify::batch_topk_indices(&pre, config.k)? {
                codes[idx / d_sae].entries.push((idx % d_sae, flat[idx]));
            }
            Ok(codes)
        }
        Sparsifier::TopK | Sparsifier::Matryoshka => (0..batch.rows())
            .map(|r| encode(params, config, batch.row(r), decoder_norms))
            .collect(),
    }
}

/// `a = z U` for a sparse code.
pub fn project(params: &PolySaeParams, z: &SparseCode) -> Vec<f64> {
    let mut a = vec![0.0; params.u.cols()];
    for &(i, zi) in &z.entries {
        for (ak, &uk) in a.iter_mut().zip(params.u.row(i)) {
            *ak += zi * uk;
        }
    }
    a
}

/// Decoder output for a projected code `a = zU`, without `b_dec`.
pub fn decode_projected(params: &PolySaeParams, a: &[f64]) -> Vec<f64> {
    let Ranks { r2, r3, .. } = params.ranks();
    let sq: Vec<f64> = a[..r2].iter().map(|v| v * v).collect();
    let cube: Vec<f64> = a[..r3].iter().map(|v| v * v * v).collect();
    let y1 = params.c1.mul_vec(a);
    let y2 = params.c2.mul_vec(&sq);
    let y3 = params.c3.mul_vec(&cube);
    (0..params.d())
        .map(|r| y1[r] + params.lambda2 * y2[r] + params.lambda3 * y3[r])
        .collect()
}

pub fn decode(params: &PolySaeParams, z: &SparseCode) -> Result<Vec<f64>> {
    if z.len != params.d_sae() {
        return Err(Error::shape(
            "decode",
            format!("code length {} vs d_sae {}", z.len, params.d_sae()),
        ));
    }
    let a = project(params, z);
    let mut out = decode_projected(params, &a);
    for (o, b) in out.iter_mut().zip(&params.b_dec) {
        *o += b;
    }
    Ok(out)
}

/// `d_i = ‖decode(e_i) − b_dec‖₂`, floored at [`DECODER_NORM_FLOOR`].
pub fn compute_decoder_norms(params: &PolySaeParams) -> Vec<f64> {
    (0..params.d_sae())
        .map(|i| {
            let y = decode_projected(params, params.u.row(i));
            y.iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(DECODER_NORM_FLOOR)
        })
        .collect()
}

/// Explicit linear, pair and triple dictionaries.
///
/// Column `i·d_sae + j` of `b` pairs with `z_i z_j`; column
/// `(i·d_sae + j)·d_sae + k` of `gamma` pairs with `z_i z_j z_k`.
#[derive(Clone, Debug)]
pub struct ImplicitDictionaries {
    pub a: Matrix,
    pub b: Matrix,
    pub gamma: Matrix,
}

impl ImplicitDictionaries {
    /// `A z + λ2 B (z⊗z) + λ3 Γ (z⊗z⊗z)`, the decoder output minus `b_dec`.
    pub fn apply(&self, z: &[f64], lambda2: f64, lambda3: f64) -> Vec<f64> {
        let n = z.len();
        let zz: Vec<f64> = (0..n * n).map(|c| z[c / n] * z[c % n]).collect();
        let zzz: Vec<f64> = (0..n * n * n).map(|c| zz[c / n] * z[c % n]).collect();
        let y1 = self.a.mul_vec(z);
        let y2 = self.b.mul_vec(&zz);
        let y3 = self.gamma.mul_vec(&zzz);
        (0..y1.len())
            .map(|r| y1[r] + lambda2 * y2[r] + lambda3 * y3[r])
            .collect()
    }
}

pub fn materialize_dictionaries(params: &PolySaeParams, cap: usize) -> Result<ImplicitDictionaries> {
    let n = params.d_sae();
    if n > cap {
        return Err(Error::CapExceeded { d_sae: n, cap });
    }
    let Ranks { r2, r3, .. } = params.ranks();
    let u2 = params.u.leading_cols(r2);
    let u3 = params.u.leading_cols(r3);

    // Khatri–Rao expansions: row (i, j[, k]) is the elementwise product of U rows.
    let kr2 = Matrix::from_fn(n * n, r2, |row, c| u2[(row / n, c)] * u2[(row % n, c)]);
    let kr3 = Matrix::from_fn(n * n * n, r3, |row, c| {
        u3[(row / (n * n), c)] * u3[((row / n) % n, c)] * u3[(row % n, c)]
    });

    Ok(ImplicitDictionaries {
        a: crate::linalg::matmul(&params.c1, &params.u.transpose())?,
        b: crate::linalg::matmul(&params.c2, &kr2.transpose())?,
        gamma: crate::linalg::matmul(&params.c3, &kr3.transpose())?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCounts {
    /// `2·d·d_sae + d + d_sae`
    pub sae_params: u64,
    /// Extra parameters over a standard SAE of the same width, from the
    /// actual tensor shapes. Equals `d² + d(R2+R3) + 2` when `R1 = d`.
    pub polysae_extra: i64,
    pub ratio: f64,
}

pub fn param_counts(config: &ModelConfig) -> ParamCounts {
    let d = config.d as u64;
    let n = config.d_sae as u64;
    let Ranks { r1, r2, r3 } = config.ranks;
    let (r1, r2, r3) = (r1 as u64, r2 as u64, r3 as u64);
    let sae = 2 * d * n + d + n;
    let poly = d * n + n + n * r1 + d * (r1 + r2 + r3) + d + 2;
    let extra = poly as i64 - sae as i64;
    ParamCounts {
        sae_params: sae,
        polysae_extra: extra,
        ratio: extra as f64 / sae as f64,
    }
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// `C(d_sae, 2)·R2 + C(d_sae, 3)·R3`.
pub fn compositional_capacity(config: &ModelConfig) -> BigUint {
    let n = config.d_sae as u64;
    binomial(n, 2) * BigUint::from(config.ranks.r2) + binomial(n, 3) * BigUint::from(config.ranks.r3)
}
