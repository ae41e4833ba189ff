// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic activations with planted multiplicative feature interactions.
//!
//! Each row is
//!
//! ```text
//! x = D* s + Σ_pairs   strength · s_i s_j · w_ij
//!          + Σ_triples strength · s_i s_j s_k · w_ijk + noise
//! ```
//!
//! with sparse nonnegative `s`. Carrier vectors `w` are orthogonal to the
//! atoms they combine, so a purely linear decoder cannot fold the interaction
//! into those atoms. Which features fire together is controlled by an
//! Ising-style coupling, so co-occurrence can be pushed up on pairs that do
//! not interact at all.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::model::SparseCode;

/// Gibbs sweeps used to resample activation indicators under coupling.
pub const GIBBS_SWEEPS: usize = 8;

/// Monte-Carlo rows used by the energy calibration.
pub const CALIBRATION_ROWS: usize = 100_000;

const BLOCK_ROWS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub i: usize,
    pub j: usize,
    pub carrier: Vec<f64>,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleTerm {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub carrier: Vec<f64>,
    pub strength: f64,
}

/// Positive `factor` raises the chance that `i` and `j` fire together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `d × m`, unit columns.
    pub dstar: Matrix,
    pub pairs: Vec<PairTerm>,
    pub triples: Vec<TripleTerm>,
    pub feature_probs: Vec<f64>,
    pub cooccurrence_boost: Vec<Coupling>,
    pub noise_sigma: f64,
}

impl GroundTruth {
    pub fn d(&self) -> usize {
        self.dstar.rows()
    }

    pub fn m(&self) -> usize {
        self.dstar.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if self.feature_probs.len() != m {
            return Err(Error::Config(format!(
                "{} feature probabilities for {m} features",
                self.feature_probs.len()
            )));
        }
        if self.feature_probs.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::Config("feature probabilities must lie in [0, 1)".into()));
        }
        if self.feature_probs.iter().all(|&p| p == 0.0) {
            return Err(Error::Config("all feature probabilities are zero".into()));
        }
        let ids = self
            .pairs
            .iter()
            .flat_map(|p| [p.i, p.j])
            .chain(self.triples.iter().flat_map(|t| [t.i, t.j, t.k]))
            .chain(self.cooccurrence_boost.iter().flat_map(|c| [c.i, c.j]));
        if let Some(bad) = ids.into_iter().find(|&i| i >= m) {
            return Err(Error::Config(format!("feature id {bad} out of range for m = {m}")));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    fn scale_strengths(&mut self, c: f64) {
        self.pairs.iter_mut().for_each(|p| p.strength *= c);
        self.triples.iter_mut().for_each(|t| t.strength *= c);
    }

    /// Coupling lists per feature.
    fn neighbours(&self) -> Vec<Vec<(usize, f64)>> {
        let mut out = vec![Vec::new(); self.m()];
        for c in &self.cooccurrence_boost {
            out[c.i].push((c.j, c.factor));
            out[c.j].push((c.i, c.factor));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    /// `n × d`
    pub activations: Matrix,
    /// Ground-truth feature magnitudes per row (length `m`).
    pub true_codes: Vec<SparseCode>,
    /// Binary task labels, keyed `pair_{p}_active` and `feat_{f}_active`.
    pub labels: BTreeMap<String, Vec<u32>>,
}

pub fn pair_task(p: usize) -> String {
    format!("pair_{p}_active")
}

pub fn feature_task(f: usize) -> String {
    format!("feat_{f}_active")
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Active set and magnitudes for one row.
fn sample_code(gt: &GroundTruth, nbrs: &[Vec<(usize, f64)>], rng: &mut Rng) -> Vec<f64> {
    let m = gt.m();
    let mut on: Vec<bool> = gt.feature_probs.iter().map(|&p| rng.uniform() < p).collect();
    if !gt.cooccurrence_boost.is_empty() {
        let logits: Vec<f64> = gt
            .feature_probs
            .iter()
            .map(|&p| (p / (1.0 - p)).ln())
            .collect();
        for _ in 0..GIBBS_SWEEPS {
            for f in 0..m {
                let field = logits[f]
                    + nbrs[f]
                        .iter()
                        .filter(|(g, _)| on[*g])
                        .map(|(_, j)| j)
                        .sum::<f64>();
                on[f] = rng.uniform() < sigmoid(field);
            }
        }
    }
    on.iter()
        .map(|&a| if a { (1.0 + 0.25 * rng.normal()).abs() } else { 0.0 })
        .collect()
}

/// Linear-plus-noise part and interaction part of one row.
fn row_parts(gt: &GroundTruth, s: &[f64], rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let d = gt.d();
    let mut lin = vec![0.0; d];
    for (f, &sf) in s.iter().enumerate() {
        if sf != 0.0 {
            for (r, l) in lin.iter_mut().enumerate() {
                *l += sf * gt.dstar[(r, f)];
            }
        }
    }
    if gt.noise_sigma > 0.0 {
        lin.iter_mut().for_each(|v| *v += gt.noise_sigma * rng.normal());
    }
    let mut inter = vec![0.0; d];
    for p in &gt.pairs {
        let w = p.strength * s[p.i] * s[p.j];
        if w != 0.0 {
            inter.iter_mut().zip(&p.carrier).for_each(|(v, c)| *v += w * c);
        }
    }
    for t in &gt.triples {
        let w = t.strength * s[t.i] * s[t.j] * s[t.k];
        if w != 0.0 {
            inter.iter_mut().zip(&t.carrier).for_each(|(v, c)| *v += w * c);
        }
    }
    (lin, inter)
}

/// Rows are produced in blocks with per-block streams derived from `rng`,
/// so output is independent of the thread count.
fn sample_rows(gt: &GroundTruth, n: usize, rng: &Rng) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let nbrs = gt.neighbours();
    let blocks: Vec<usize> = (0..n.div_ceil(BLOCK_ROWS)).collect();
    blocks
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut r = rng.derive(b as u64);
            let rows = BLOCK_ROWS.min(n - b * BLOCK_ROWS);
            (0..rows)
                .map(|_| {
                    let s = sample_code(gt, &nbrs, &mut r);
                    let (lin, inter) = row_parts(gt, &s, &mut r);
                    (s, lin, inter)
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn generate(gt: &GroundTruth, n: usize, rng: &mut Rng) -> Result<SynthCorpus> {
    gt.validate()?;
    if n == 0 {
        return Err(Error::Input("need at least one row".into()));
    }
    let base = rng.derive(0x5eed);
    // advance the caller's stream so repeated calls differ
    rng.normal();
    let rows = sample_rows(gt, n, &base);

    let d = gt.d();
    let mut data = Vec::with_capacity(n * d);
    let mut true_codes = Vec::with_capacity(n);
    let mut labels: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for (p, _) in gt.pairs.iter().enumerate() {
        labels.insert(pair_task(p), Vec::with_capacity(n));
    }
    for f in 0..gt.m() {
        labels.insert(feature_task(f), Vec::with_capacity(n));
    }
    for (s, lin, inter) in rows {
        data.extend(lin.iter().zip(&inter).map(|(a, b)| a + b));
        for (p, term) in gt.pairs.iter().enumerate() {
            let both = s[term.i] > 0.0 && s[term.j] > 0.0;
            labels.get_mut(&pair_task(p)).unwrap().push(both as u32);
        }
        for (f, &sf) in s.iter().enumerate() {
            labels.get_mut(&feature_task(f)).unwrap().push((sf > 0.0) as u32);
        }
        true_codes.push(SparseCode::from_dense(&s));
    }
    Ok(SynthCorpus {
        activations: Matrix::from_vec(n, d, data)?,
        true_codes,
        labels,
    })
}

/// Trace covariances of the linear+noise part `L` and the interaction part
/// `I`, and their trace cross-covariance, over sampled rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyMoments {
    pub linear: f64,
    pub interaction: f64,
    pub cross: f64,
}

impl EnergyMoments {
    /// Interaction share of `tr Cov(x)` after scaling all strengths by `c`.
    pub fn fraction_at(&self, c: f64) -> f64 {
        let int = c * c * self.interaction;
        let total = self.linear + 2.0 * c * self.cross + int;
        if total > 0.0 {
            int / total
        } else {
            0.0
        }
    }
}

pub fn energy_moments(gt: &GroundTruth, n: usize, rng: &Rng) -> EnergyMoments {
    let rows = sample_rows(gt, n, rng);
    let d = gt.d();
    let nf = n as f64;
    let mut mean_l = vec![0.0; d];
    let mut mean_i = vec![0.0; d];
    for (_, l, i) in &rows {
        for c in 0..d {
            mean_l[c] += l[c] / nf;
            mean_i[c] += i[c] / nf;
        }
    }
    let mut m = EnergyMoments {
        linear: 0.0,
        interaction: 0.0,
        cross: 0.0,
    };
    for (_, l, i) in &rows {
        for c in 0..d {
            let (a, b) = (l[c] - mean_l[c], i[c] - mean_i[c]);
            m.linear += a * a / nf;
            m.interaction += b * b / nf;
            m.cross += a * b / nf;
        }
    }
    m
}

/// Measured interaction share of activation variance.
pub fn interaction_energy_fraction(gt: &GroundTruth, n: usize, rng: &Rng) -> f64 {
    energy_moments(gt, n, rng).fraction_at(1.0)
}

/// Rescales every interaction strength by one common factor so that the
/// interaction terms carry `target_fraction` of the activation variance,
/// estimated over [`CALIBRATION_ROWS`] sampled rows.
pub fn calibrate_interaction_energy(
    gt: &GroundTruth,
    target_fraction: f64,
    rng: &Rng,
) -> Result<GroundTruth> {
    if !(0.0..1.0).contains(&target_fraction) {
        return Err(Error::Config(format!(
            "target fraction must lie in [0, 1), got {target_fraction}"
        )));
    }
    let mut out = gt.clone();
    if target_fraction == 0.0 {
        out.scale_strengths(0.0);
        return Ok(out);
    }
    if gt.pairs.is_empty() && gt.triples.is_empty() {
        return Err(Error::Config("no interactions planted; target unreachable".into()));
    }
    let m = energy_moments(gt, CALIBRATION_ROWS, rng);
    if m.interaction <= 0.0 {
        return Err(Error::Config(
            "planted interactions never fire; target unreachable".into(),
        ));
    }
    // c² I (1 − t) − 2 t X c − t L = 0, positive root
    let t = target_fraction;
    let a = m.interaction * (1.0 - t);
    let b = -2.0 * t * m.cross;
    let c0 = -t * m.linear;
    let c = (-b + (b * b - 4.0 * a * c0).sqrt()) / (2.0 * a);
    out.scale_strengths(c);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub d: usize,
    pub m: usize,
    pub pairs: usize,
    pub triples: usize,
    pub boosted_noninteracting_pairs: usize,
    /// Marginal firing probability of every feature before coupling.
    pub base_prob: f64,
    /// Coupling on boosted pairs.
    pub boost_coupling: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            d: 32,
            m: 24,
            pairs: 6,
            triples: 2,
            boosted_noninteracting_pairs: 6,
            base_prob: 0.1,
            boost_coupling: 3.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

fn unit_gaussian(d: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Unit vector orthogonal to the given atom columns (two Gram–Schmidt passes).
fn carrier_orthogonal_to(dstar: &Matrix, atoms: &[usize], rng: &mut Rng) -> Vec<f64> {
    let d = dstar.rows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for &a in atoms {
        let mut v = dstar.col(a);
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    loop {
        let mut w = unit_gaussian(d, rng);
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return w.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Planted scenario in which interacting pairs rarely co-fire and strongly
/// coupled pairs never interact. Strengths start at 1; use
/// [`calibrate_interaction_energy`] to set their scale.
pub fn default_scenario(cfg: &ScenarioConfig) -> Result<GroundTruth> {
    let ScenarioConfig { d, m, pairs, triples, .. } = *cfg;
    let needed = 2 * pairs + 3 * triples;
    if d == 0 || needed > m {
        return Err(Error::Config(format!(
            "{pairs} pairs and {triples} triples need {needed} distinct features, have m = {m}"
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let dstar = Matrix::from_vec(
        m,
        d,
        (0..m).flat_map(|_| unit_gaussian(d, &mut rng)).collect(),
    )?
    .transpose();

    let mut perm: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut perm);
    let pair_terms: Vec<PairTerm> = (0..pairs)
        .map(|p| {
            let (a, b) = (perm[2 * p], perm[2 * p + 1]);
            let (i, j) = (a.min(b), a.max(b));
            PairTerm {
                i,
                j,
                carrier: carrier_orthogonal_to(&dstar, &[i, j], &mut rng),
                strength: 1.0,
            }
        })
        .collect();
    let triple_terms: Vec<TripleTerm> = (0..triples)
        .map(|t| {
            let mut ids = [
                perm[2 * pairs + 3 * t],
                perm[2 * pairs + 3 * t + 1],
                perm[2 * pairs + 3 * t + 2],
            ];
            ids.sort_unstable();
            TripleTerm {
                i: ids[0],
                j: ids[1],
                k: ids[2],
                carrier: carrier_orthogonal_to(&dstar, &ids, &mut rng),
                strength: 1.0,
            }
        })
        .collect();

    // Boosted pairs: disjoint, never an interacting pair or inside a triple,
    // preferring features that take part in no interaction at all.
    let mut forbidden: BTreeSet<(usize, usize)> = pair_terms.iter().map(|p| (p.i, p.j)).collect();
    for t in &triple_terms {
        forbidden.extend([(t.i, t.j), (t.i, t.k), (t.j, t.k)]);
    }
    let interacting: BTreeSet<usize> = perm[..needed].iter().copied().collect();
    let mut candidates: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .filter(|p| !forbidden.contains(p))
        .collect();
    rng.shuffle(&mut candidates);
    candidates.sort_by_key(|&(i, j)| interacting.contains(&i) as u8 + interacting.contains(&j) as u8);
    let mut used = BTreeSet::new();
    let mut boosts = Vec::new();
    for (i, j) in candidates {
        if boosts.len() == cfg.boosted_noninteracting_pairs {
            break;
        }
        if used.contains(&i) || used.contains(&j) {
            continue;
        }
        used.extend([i, j]);
        boosts.push(Coupling {
            i,
            j,
            factor: cfg.boost_coupling,
        });
    }
    if boosts.len() < cfg.boosted_noninteracting_pairs {
        return Err(Error::Config(format!(
            "only {} disjoint non-interacting pairs available",
            boosts.len()
        )));
    }

    let gt = GroundTruth {
        dstar,
        pairs: pair_terms,
        triples: triple_terms,
        feature_probs: vec![cfg.base_prob; m],
        cooccurrence_boost: boosts,
        noise_sigma: cfg.noise_sigma,
    };
    gt.validate()?;
    Ok(gt)
}

/// Fraction of rows in which both features fire.
pub fn cooccurrence_rate(corpus: &SynthCorpus, i: usize, j: usize) -> f64 {
    let hits = corpus
        .true_codes
        .iter()
        .filter(|c| c.get(i) > 0.0 && c.get(j) > 0.0)
        .count();
    hits as f64 / corpus.true_codes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_feature_gt() -> GroundTruth {
        let dstar = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        GroundTruth {
            dstar,
            pairs: vec![PairTerm {
                i: 0,
                j: 1,
                carrier: vec![0.0, 0.0, 1.0],
                strength: 2.0,
            }],
            triples: vec![],
            feature_probs: vec![0.5, 0.5],
            cooccurrence_boost: vec![],
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn single_atom_row_is_the_atom() {
        let mut gt = two_feature_gt();
        gt.pairs.clear();
        let s = [1.0, 0.0];
        let (lin, inter) = row_parts(&gt, &s, &mut Rng::new(0));
        assert_eq!(lin, gt.dstar.col(0));
        assert_eq!(inter, vec![0.0; 3]);
    }

    #[test]
    fn pair_row_adds_carrier() {
        let gt = two_feature_gt();
        let (lin, inter) = row_parts(&gt, &[1.0, 1.0], &mut Rng::new(0));
        let x: Vec<f64> = lin.iter().zip(&inter).map(|(a, b)| a + b).collect();
        assert_eq!(x, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn doubling_strength_quadruples_interaction_energy() {
        let gt = two_feature_gt();
        let mut doubled = gt.clone();
        doubled.scale_strengths(2.0);
        let rng = Rng::new(5);
        let a = energy_moments(&gt, 20_000, &rng);
        let b = energy_moments(&doubled, 20_000, &rng);
        assert!((b.interaction / a.interaction - 4.0).abs() < 1e-12);
        assert_eq!(a.linear, b.linear);
    }

    #[test]
    fn zero_target_zeroes_strengths() {
        let gt = calibrate_interaction_energy(&two_feature_gt(), 0.0, &Rng::new(1)).unwrap();
        assert!(gt.pairs.iter().all(|p| p.strength == 0.0));
    }

    #[test]
    fn unreachable_target_is_an_error() {
        let mut gt = two_feature_gt();
        gt.pairs.clear();
        assert!(calibrate_interaction_energy(&gt, 0.3, &Rng::new(1)).is_err());
    }

    #[test]
    fn all_zero_probabilities_rejected() {
        let mut gt = two_feature_gt();
        gt.feature_probs = vec![0.0, 0.0];
        assert!(generate(&gt, 10, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn labels_are_consistent() {
        let gt = default_scenario(&ScenarioConfig::default()).unwrap();
        let corpus = generate(&gt, 3000, &mut Rng::new(2)).unwrap();
        for (p, term) in gt.pairs.iter().enumerate() {
            let pair = &corpus.labels[&pair_task(p)];
            let a = &corpus.labels[&feature_task(term.i)];
            let b = &corpus.labels[&feature_task(term.j)];
            for r in 0..3000 {
                assert_eq!(pair[r], a[r] & b[r]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let gt = default_scenario(&ScenarioConfig::default()).unwrap();
        let a = generate(&gt, 5000, &mut Rng::new(9)).unwrap();
        let b = generate(&gt, 5000, &mut Rng::new(9)).unwrap();
        assert_eq!(a.activations, b.activations);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn carriers_orthogonal_to_their_atoms() {
        let gt = default_scenario(&ScenarioConfig::default()).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for p in &gt.pairs {
            for a in [p.i, p.j] {
                assert!(dot(&p.carrier, &gt.dstar.col(a)).abs() < 1e-10);
            }
            assert!((dot(&p.carrier, &p.carrier) - 1.0).abs() < 1e-12);
        }
        for t in &gt.triples {
            for a in [t.i, t.j, t.k] {
                assert!(dot(&t.carrier, &gt.dstar.col(a)).abs() < 1e-10);
            }
        }
        for c in 0..gt.m() {
            assert!((dot(&gt.dstar.col(c), &gt.dstar.col(c)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_interactions_is_plain_linear() {
        let cfg = ScenarioConfig {
            pairs: 0,
            triples: 0,
            noise_sigma: 0.0,
            ..ScenarioConfig::default()
        };
        let gt = default_scenario(&cfg).unwrap();
        let corpus = generate(&gt, 200, &mut Rng::new(1)).unwrap();
        for (r, code) in corpus.true_codes.iter().enumerate() {
            let x = gt.dstar.mul_vec(&code.to_dense());
            for (a, b) in x.iter().zip(corpus.activations.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
