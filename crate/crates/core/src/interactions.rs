// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interaction strengths read off trained decoder weights, compared against
//! how often features actually fire together.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{PolySaeParams, SparseCode};

fn check_index(params: &PolySaeParams, ids: &[usize]) -> Result<()> {
    match ids.iter().find(|&&i| i >= params.d_sae()) {
        Some(i) => Err(Error::Input(format!(
            "feature {i} out of range for d_sae = {}",
            params.d_sae()
        ))),
        None => Ok(()),
    }
}

/// `‖C · (∘ rows of U restricted to the first C.cols() columns)‖₂`.
fn projected_product_norm(u: &Matrix, c: &Matrix, rows: &[usize]) -> f64 {
    let r = c.cols();
    let prod: Vec<f64> = (0..r)
        .map(|k| rows.iter().map(|&i| u[(i, k)]).product())
        .collect();
    c.mul_vec(&prod).iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `B_ij = |λ2| · ‖C2 (u_i ∘ u_j)‖₂` over the first `R2` columns of `U`.
pub fn interaction_strength(params: &PolySaeParams, i: usize, j: usize) -> Result<f64> {
    check_index(params, &[i, j])?;
    Ok(params.lambda2.abs() * projected_product_norm(&params.u, &params.c2, &[i, j]))
}

/// Three-way analogue of [`interaction_strength`] using `λ3`, `C3`, `R3`.
pub fn triple_score(params: &PolySaeParams, i: usize, j: usize, k: usize) -> Result<f64> {
    check_index(params, &[i, j, k])?;
    Ok(params.lambda3.abs() * projected_product_norm(&params.u, &params.c3, &[i, j, k]))
}

/// Streaming co-occurrence counts, activation masses and co-moments over a
/// fixed feature subset.
///
/// Covariance uses pairwise Welford updates, so feeding the stream in any
/// chunking gives the same counts and masses exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceAccumulator {
    features: Vec<usize>,
    n: u64,
    /// Upper triangle, row-major over subset positions.
    counts: Vec<u64>,
    mass: Vec<f64>,
    mean: Vec<f64>,
    comoment: Vec<f64>,
}

fn tri_index(m: usize, a: usize, b: usize) -> usize {
    // a < b
    a * m - a * (a + 1) / 2 + (b - a - 1)
}

impl CooccurrenceAccumulator {
    pub fn new(features: &[usize]) -> Self {
        let m = features.len();
        let pairs = m * m.saturating_sub(1) / 2;
        Self {
            features: features.to_vec(),
            n: 0,
            counts: vec![0; pairs],
            mass: vec![0.0; m],
            mean: vec![0.0; m],
            comoment: vec![0.0; pairs],
        }
    }

    pub fn features(&self) -> &[usize] {
        &self.features
    }

    pub fn positions(&self) -> u64 {
        self.n
    }

    pub fn push(&mut self, code: &SparseCode) {
        let m = self.features.len();
        let z: Vec<f64> = self.features.iter().map(|&f| code.get(f)).collect();
        self.n += 1;
        let nf = self.n as f64;
        let delta: Vec<f64> = z.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        for a in 0..m {
            self.mass[a] += z[a];
            for b in a + 1..m {
                let t = tri_index(m, a, b);
                if z[a] > 0.0 && z[b] > 0.0 {
                    self.counts[t] += 1;
                }
                // C_n = C_{n-1} + (n-1)/n · δa · δb
                self.comoment[t] += (nf - 1.0) / nf * delta[a] * delta[b];
            }
        }
        self.mean.iter_mut().zip(&delta).for_each(|(mu, dl)| *mu += dl / nf);
    }

    pub fn extend<'a>(&mut self, codes: impl IntoIterator<Item = &'a SparseCode>) {
        codes.into_iter().for_each(|c| self.push(c));
    }

    /// Number of positions where both subset positions `a` and `b` fire.
    pub fn count(&self, a: usize, b: usize) -> u64 {
        let (a, b) = (a.min(b), a.max(b));
        if a == b {
            return 0;
        }
        self.counts[tri_index(self.features.len(), a, b)]
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Population covariance of subset positions `a` and `b`.
    pub fn covariance(&self, a: usize, b: usize) -> Result<f64> {
        if self.n < 2 {
            return Err(Error::Input(format!(
                "covariance needs at least 2 positions, got {}",
                self.n
            )));
        }
        let (a, b) = (a.min(b), a.max(b));
        if a == b {
            return Err(Error::Input("covariance of a feature with itself".into()));
        }
        Ok(self.comoment[tri_index(self.features.len(), a, b)] / self.n as f64)
    }
}

/// Co-occurrence counts over `features`; see [`CooccurrenceAccumulator`].
pub fn cooccurrence_counts(codes: &[SparseCode], features: &[usize]) -> CooccurrenceAccumulator {
    let mut acc = CooccurrenceAccumulator::new(features);
    acc.extend(codes);
    acc
}

/// Population covariance matrix of the codes restricted to `features`.
pub fn activation_covariance(codes: &[SparseCode], features: &[usize]) -> Result<Matrix> {
    if codes.len() < 2 {
        return Err(Error::Input(format!(
            "covariance needs at least 2 positions, got {}",
            codes.len()
        )));
    }
    let acc = cooccurrence_counts(codes, features);
    let m = features.len();
    let mut out = Matrix::zeros(m, m);
    for a in 0..m {
        for b in a + 1..m {
            let c = acc.covariance(a, b)?;
            out[(a, b)] = c;
            out[(b, a)] = c;
        }
    }
    // diagonal: population variance, two-pass
    for (a, &f) in features.iter().enumerate() {
        let mean = acc.mean[a];
        out[(a, a)] = codes.iter().map(|c| (c.get(f) - mean).powi(2)).sum::<f64>() / codes.len() as f64;
    }
    Ok(out)
}

/// Total activation per feature, `Σ_n z_i`.
pub fn activation_mass(codes: &[SparseCode], d_sae: usize) -> Vec<f64> {
    let mut mass = vec![0.0; d_sae];
    for c in codes {
        for &(i, v) in &c.entries {
            mass[i] += v;
        }
    }
    mass
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub activation_mass: Vec<f64>,
    /// Features by descending mass, ties to the lower index.
    pub top_features: Vec<usize>,
}

impl FeatureStats {
    pub fn from_codes(codes: &[SparseCode], d_sae: usize) -> Self {
        let activation_mass = activation_mass(codes, d_sae);
        let mut top_features: Vec<usize> = (0..d_sae).collect();
        top_features.sort_by(|&a, &b| {
            activation_mass[b]
                .total_cmp(&activation_mass[a])
                .then(a.cmp(&b))
        });
        Self {
            activation_mass,
            top_features,
        }
    }
}

/// Sample Pearson correlation; `Undefined` when either input is constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(r) => Some(r),
            Correlation::Undefined => None,
        }
    }
}

impl std::fmt::Display for Correlation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Correlation::Defined(r) => write!(f, "{r:.4}"),
            Correlation::Undefined => write!(f, "undefined"),
        }
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!(
            "pearson over {} and {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Input("pearson needs at least 2 values".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (a, b) = (x - mx, y - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation::Undefined);
    }
    Ok(Correlation::Defined((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub i: usize,
    pub j: usize,
    pub b_ij: f64,
    pub n_ij: u64,
    pub cov_ij: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub score: f64,
    /// Positions where all three fire.
    pub cooccurrence: u64,
}

/// Scores every pair among `features`, sorted by `(i, j)`.
pub fn pair_records(
    params: &PolySaeParams,
    codes: &[SparseCode],
    features: &[usize],
) -> Result<Vec<PairRecord>> {
    check_index(params, features)?;
    let acc = cooccurrence_counts(codes, features);
    let m = features.len();
    let idx: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let mut out: Vec<PairRecord> = idx
        .into_par_iter()
        .map(|(a, b)| {
            let (fa, fb) = (features[a], features[b]);
            Ok(PairRecord {
                i: fa.min(fb),
                j: fa.max(fb),
                b_ij: interaction_strength(params, fa, fb)?,
                n_ij: acc.count(a, b),
                cov_ij: acc.covariance(a, b)?,
            })
        })
        .collect::<Result<_>>()?;
    out.sort_by_key(|p| (p.i, p.j));
    Ok(out)
}

/// Nearest-rank percentile: the value at rank `⌈p/100 · n⌉` of the sorted data.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Input(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.max(1) - 1])
}

/// Pairs with `b_ij` strictly above the strength percentile and `n_ij`
/// strictly below the co-occurrence percentile, strongest first.
pub fn mine_latent_pairs(
    pairs: &[PairRecord],
    strength_percentile: f64,
    cooccurrence_percentile: f64,
) -> Result<Vec<PairRecord>> {
    let b: Vec<f64> = pairs.iter().map(|p| p.b_ij).collect();
    let n: Vec<f64> = pairs.iter().map(|p| p.n_ij as f64).collect();
    let b_cut = nearest_rank_percentile(&b, strength_percentile)?;
    let n_cut = nearest_rank_percentile(&n, cooccurrence_percentile)?;
    let mut out: Vec<PairRecord> = pairs
        .iter()
        .filter(|p| p.b_ij > b_cut && (p.n_ij as f64) < n_cut)
        .cloned()
        .collect();
    out.sort_by(|x, y| y.b_ij.total_cmp(&x.b_ij).then((x.i, x.j).cmp(&(y.i, y.j))));
    Ok(out)
}

/// For each of the `top_pairs` strongest pairs, the third feature with the
/// highest [`triple_score`] among features that fire alongside both.
pub fn mine_triples(
    params: &PolySaeParams,
    codes: &[SparseCode],
    pairs: &[PairRecord],
    top_pairs: usize,
) -> Result<Vec<TripleRecord>> {
    let mut ranked: Vec<&PairRecord> = pairs.iter().collect();
    ranked.sort_by(|x, y| y.b_ij.total_cmp(&x.b_ij).then((x.i, x.j).cmp(&(y.i, y.j))));
    ranked.truncate(top_pairs);
    let mut out = Vec::new();
    for p in ranked {
        let mut counts = vec![0u64; params.d_sae()];
        for c in codes.iter().filter(|c| c.get(p.i) > 0.0 && c.get(p.j) > 0.0) {
            for &(k, _) in &c.entries {
                if k != p.i && k != p.j {
                    counts[k] += 1;
                }
            }
        }
        let mut best: Option<TripleRecord> = None;
        for (k, &n) in counts.iter().enumerate().filter(|(_, &n)| n > 0) {
            let score = triple_score(params, p.i, p.j, k)?;
            if best.as_ref().is_none_or(|b| score > b.score) {
                let mut ids = [p.i, p.j, k];
                ids.sort_unstable();
                best = Some(TripleRecord {
                    i: ids[0],
                    j: ids[1],
                    k: ids[2],
                    score,
                    cooccurrence: n,
                });
            }
        }
        out.extend(best);
    }
    Ok(out)
}

/// Correlations of decoder strength and of activation covariance with
/// co-occurrence, over all pairs of the `top_m` features by mass.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationStudy {
    pub features: Vec<usize>,
    pub pairs: Vec<PairRecord>,
    pub r_poly: Correlation,
    pub r_cov: Correlation,
}

pub fn correlation_study(
    params: &PolySaeParams,
    codes: &[SparseCode],
    top_m: usize,
) -> Result<CorrelationStudy> {
    if top_m > params.d_sae() || top_m < 2 {
        return Err(Error::Input(format!(
            "top_m = {top_m} must lie in [2, d_sae = {}]",
            params.d_sae()
        )));
    }
    let stats = FeatureStats::from_codes(codes, params.d_sae());
    let mut features = stats.top_features[..top_m].to_vec();
    features.sort_unstable();
    let pairs = pair_records(params, codes, &features)?;
    let n: Vec<f64> = pairs.iter().map(|p| p.n_ij as f64).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.b_ij).collect();
    let cov: Vec<f64> = pairs.iter().map(|p| p.cov_ij).collect();
    Ok(CorrelationStudy {
        r_poly: pearson(&b, &n)?,
        r_cov: pearson(&cov, &n)?,
        features,
        pairs,
    })
}

/// `pearson(Cov_ij, N_ij)` over all pairs of the `top_m` features by mass.
/// Needs only the codes, so it applies to any sparse autoencoder.
pub fn covariance_correlation(codes: &[SparseCode], d_sae: usize, top_m: usize) -> Result<Correlation> {
    if top_m > d_sae || top_m < 2 {
        return Err(Error::Input(format!("top_m = {top_m} must lie in [2, d_sae = {d_sae}]")));
    }
    let stats = FeatureStats::from_codes(codes, d_sae);
    let mut features = stats.top_features[..top_m].to_vec();
    features.sort_unstable();
    let acc = cooccurrence_counts(codes, &features);
    let (mut cov, mut n) = (Vec::new(), Vec::new());
    for a in 0..top_m {
        for b in a + 1..top_m {
            cov.push(acc.covariance(a, b)?);
            n.push(acc.count(a, b) as f64);
        }
    }
    pearson(&cov, &n)
}

pub const PAIR_HEADER: &str = "i\tj\tstrength\tcooccurrence\tcovariance";
pub const TRIPLE_HEADER: &str = "i\tj\tk\tstrength\tcooccurrence\tcovariance";

pub fn pair_table(pairs: &[PairRecord]) -> String {
    let mut s = format!("{PAIR_HEADER}\n");
    for p in pairs {
        writeln!(s, "{}\t{}\t{:.6e}\t{}\t{:.6e}", p.i, p.j, p.b_ij, p.n_ij, p.cov_ij).unwrap();
    }
    s
}

/// Triple rows carry no covariance; that column is `NA`.
pub fn triple_table(triples: &[TripleRecord]) -> String {
    let mut s = format!("{TRIPLE_HEADER}\n");
    for t in triples {
        writeln!(s, "{}\t{}\t{}\t{:.6e}\t{}\tNA", t.i, t.j, t.k, t.score, t.cooccurrence).unwrap();
    }
    s
}
