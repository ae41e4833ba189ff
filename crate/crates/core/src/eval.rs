// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reconstruction error, sparse probing and class separation.
//!
//! Probing follows one fixed recipe: rank features on the train split by the
//! gap between class-conditional means, fit a logistic regression on the
//! chosen features, score F1 on the held-out split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::model::{compute_decoder_norms, decode, encode, ModelConfig, PolySaeParams, SparseCode};

/// Normalization tag attached to every reported MSE.
pub const MSE_TAG: &str = "mean_row_sq_l2";

/// Mean over rows of `‖recon(x) − x‖²`.
pub fn mse_with<F>(corpus: &Matrix, recon: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if corpus.rows() == 0 {
        return Err(Error::Input("mse of an empty corpus".into()));
    }
    let errs: Vec<f64> = (0..corpus.rows())
        .into_par_iter()
        .map(|r| {
            let x = corpus.row(r);
            let y = recon(x)?;
            Ok(x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum())
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / corpus.rows() as f64)
}

/// Per-token codes for a whole corpus, decoder norms computed once.
///
/// BatchTopK models are encoded with per-token Top-K at inference.
pub fn encode_corpus(
    params: &PolySaeParams,
    config: &ModelConfig,
    corpus: &Matrix,
) -> Result<Vec<SparseCode>> {
    if corpus.cols() != params.d() {
        return Err(Error::shape(
            "encode",
            format!("corpus d = {}, model d = {}", corpus.cols(), params.d()),
        ));
    }
    let norms = compute_decoder_norms(params);
    (0..corpus.rows())
        .into_par_iter()
        .map(|r| encode(params, config, corpus.row(r), &norms))
        .collect()
}

pub fn mse(params: &PolySaeParams, config: &ModelConfig, corpus: &Matrix) -> Result<f64> {
    let codes = encode_corpus(params, config, corpus)?;
    let errs: Vec<f64> = (0..corpus.rows())
        .into_par_iter()
        .map(|r| {
            let y = decode(params, &codes[r])?;
            Ok(corpus
                .row(r)
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum())
        })
        .collect::<Result<_>>()?;
    if errs.is_empty() {
        return Err(Error::Input("mse of an empty corpus".into()));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Disjoint train/test row indices covering `0..n`, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

    pub fn seeded(n: usize, test_fraction: f64, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(seed).shuffle(&mut order);
        let n_test = ((n as f64) * test_fraction).round() as usize;
        let mut test = order[..n_test].to_vec();
        let mut train = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        Self { train, test }
    }
}

/// Codes and labels for one task, with a fixed split.
#[derive(Clone, Copy, Debug)]
pub struct ProbeDataset<'a> {
    pub codes: &'a [SparseCode],
    pub labels: &'a [u32],
    pub split: &'a Split,
}

/// The train rows of a dataset, and nothing else.
#[derive(Clone, Copy, Debug)]
pub struct TrainView<'a> {
    codes: &'a [SparseCode],
    labels: &'a [u32],
    rows: &'a [usize],
}

impl<'a> TrainView<'a> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a SparseCode, u32)> + '_ {
        self.rows.iter().map(|&r| (&self.codes[r], self.labels[r]))
    }
}

impl<'a> ProbeDataset<'a> {
    pub fn new(codes: &'a [SparseCode], labels: &'a [u32], split: &'a Split) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} codes but {} labels",
                codes.len(),
                labels.len()
            )));
        }
        if let Some(&r) = split.train.iter().chain(&split.test).find(|&&r| r >= codes.len()) {
            return Err(Error::Input(format!("split row {r} out of range")));
        }
        Ok(Self { codes, labels, split })
    }

    pub fn train_view(&self) -> TrainView<'a> {
        TrainView {
            codes: self.codes,
            labels: self.labels,
            rows: &self.split.train,
        }
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> Vec<u32> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

/// Top `count` features by `|mean(z | positive) − mean(z | negative)|` on
/// the train rows, ties toward the lower index.
pub fn select_features(view: &TrainView, positive: u32, count: usize) -> Result<Vec<usize>> {
    let width = view.iter().next().map_or(0, |(c, _)| c.len);
    let mut sum = [vec![0.0; width], vec![0.0; width]];
    let mut n = [0usize; 2];
    for (code, label) in view.iter() {
        let c = (label == positive) as usize;
        n[c] += 1;
        for &(i, v) in &code.entries {
            sum[c][i] += v;
        }
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(Error::Input(
            "feature selection needs both classes in the train split".into(),
        ));
    }
    let score: Vec<f64> = (0..width)
        .map(|i| (sum[1][i] / n[1] as f64 - sum[0][i] / n[0] as f64).abs())
        .collect();
    let mut ids: Vec<usize> = (0..width).collect();
    ids.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    ids.truncate(count);
    Ok(ids)
}

/// Logistic-regression training recipe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRecipe {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ProbeRecipe {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.1,
        }
    }
}

impl ProbeRecipe {
    pub fn tag(&self) -> String {
        format!(
            "logreg-gd it={} lr={} f64 standardized(train)",
            self.iterations, self.learning_rate
        )
    }
}

/// `2tp / (2tp + fp + fn)`, and 0 when nothing is positive on either side.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// F1 for class `positive` on the test split of a logistic regression fit on
/// the train split over `features`.
pub fn probe_f1_with(
    ds: &ProbeDataset,
    positive: u32,
    features: &[usize],
    recipe: ProbeRecipe,
) -> Result<f64> {
    let gather = |rows: &[usize]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&r| features.iter().map(|&f| ds.codes[r].get(f)).collect())
            .collect()
    };
    let train_x = gather(&ds.split.train);
    let train_y: Vec<f64> = ds
        .split
        .train
        .iter()
        .map(|&r| (ds.labels[r] == positive) as u8 as f64)
        .collect();
    if train_x.is_empty() || ds.split.test.is_empty() {
        return Err(Error::Input("probe needs nonempty train and test splits".into()));
    }
    let n = train_x.len() as f64;

    // standardize by train statistics; constant features are dropped
    let mut keep = Vec::new();
    for c in 0..features.len() {
        let mean = train_x.iter().map(|x| x[c]).sum::<f64>() / n;
        let var = train_x.iter().map(|x| (x[c] - mean).powi(2)).sum::<f64>() / n;
        if var > 0.0 {
            keep.push((c, mean, var.sqrt()));
        }
    }
    let standardize = |x: &[f64]| -> Vec<f64> {
        keep.iter().map(|&(c, m, s)| (x[c] - m) / s).collect()
    };
    let xs: Vec<Vec<f64>> = train_x.iter().map(|x| standardize(x)).collect();

    let mut w = vec![0.0; keep.len()];
    let mut b = 0.0;
    for _ in 0..recipe.iterations {
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(&train_y) {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let e = sigmoid(z) - y;
            gb += e;
            gw.iter_mut().zip(x).for_each(|(g, a)| *g += e * a);
        }
        b -= recipe.learning_rate * gb / n;
        w.iter_mut()
            .zip(&gw)
            .for_each(|(wi, g)| *wi -= recipe.learning_rate * g / n);
    }

    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (x, &r) in gather(&ds.split.test).iter().zip(&ds.split.test) {
        let z = b + standardize(x).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
        let predicted = z > 0.0;
        let actual = ds.labels[r] == positive;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1_score(tp, fp, fn_))
}

pub fn probe_f1(ds: &ProbeDataset, positive: u32, features: &[usize]) -> Result<f64> {
    probe_f1_with(ds, positive, features, ProbeRecipe::default())
}

/// Exact 1-Wasserstein distance between two equal-weight empirical
/// distributions: `∫ |F_a − F_b|` over the merged support.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("wasserstein1 needs nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wasserstein1 sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (next - prev) * (i as f64 / na - j as f64 / nb).abs();
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Probing results for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    /// Selected features at the largest K, best first. For multiclass tasks
    /// these are the features of the lowest class.
    pub features: Vec<usize>,
    /// F1 (macro over classes for multiclass tasks) keyed by K.
    pub f1: BTreeMap<usize, f64>,
    /// W1 between class-conditional test activations of the K = 1 feature.
    pub wasserstein: f64,
}

/// Evaluates one task at every K in `ks`.
pub fn evaluate_task(ds: &ProbeDataset, task: &str, ks: &[usize]) -> Result<TaskReport> {
    let classes = ds.classes();
    if classes.len() < 2 {
        return Err(Error::Input(format!("task {task} has a single class")));
    }
    // binary tasks probe class 1 (or the larger id); multiclass goes one-vs-rest
    let positives: Vec<u32> = if classes.len() == 2 {
        vec![classes[1]]
    } else {
        classes.clone()
    };
    let k_max = ks.iter().copied().max().unwrap_or(1).max(1);
    let view = ds.train_view();
    let mut f1: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut w1 = 0.0;
    let mut first = Vec::new();
    for &pos in &positives {
        let ranked = select_features(&view, pos, k_max)?;
        for &k in ks {
            *f1.get_mut(&k).unwrap() +=
                probe_f1(ds, pos, &ranked[..k.min(ranked.len())])? / positives.len() as f64;
        }
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for &r in &ds.split.test {
            let v = ds.codes[r].get(ranked[0]);
            if ds.labels[r] == pos {
                inside.push(v)
            } else {
                outside.push(v)
            }
        }
        if !inside.is_empty() && !outside.is_empty() {
            w1 += wasserstein1(&inside, &outside)? / positives.len() as f64;
        }
        if first.is_empty() {
            first = ranked;
        }
    }
    Ok(TaskReport {
        task: task.to_string(),
        features: first,
        f1,
        wasserstein: w1,
    })
}

/// Evaluates every labelled task in parallel; output is ordered by task name.
pub fn evaluate_tasks(
    codes: &[SparseCode],
    labels: &BTreeMap<String, Vec<u32>>,
    split: &Split,
    ks: &[usize],
) -> Result<Vec<TaskReport>> {
    let tasks: Vec<(&String, &Vec<u32>)> = labels.iter().collect();
    tasks
        .into_par_iter()
        .map(|(name, y)| {
            let ds = ProbeDataset::new(codes, y, split)?;
            evaluate_task(&ds, name, ks)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mse_tag: String,
    pub tasks: Vec<TaskReport>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(mse: f64, tasks: Vec<TaskReport>) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("probe_recipe".into(), ProbeRecipe::default().tag());
        metadata.insert(
            "wasserstein_basis".into(),
            "K=1 selected feature, class-conditional test activations, unscaled".into(),
        );
        metadata.insert("test_fraction".into(), Split::DEFAULT_TEST_FRACTION.to_string());
        Self {
            mse,
            mse_tag: MSE_TAG.into(),
            tasks,
            metadata,
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Stable text rendering with four decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            writeln!(s, "{k} = {v:?}").unwrap();
        }
        writeln!(s, "mse = {:.4}", self.mse).unwrap();
        writeln!(s, "mse_normalization = {:?}", self.mse_tag).unwrap();
        for t in &self.tasks {
            writeln!(s, "\n[task.{}]", t.task).unwrap();
            let ids: Vec<String> = t.features.iter().map(|f| f.to_string()).collect();
            writeln!(s, "features = [{}]", ids.join(", ")).unwrap();
            for (k, f1) in &t.f1 {
                writeln!(s, "f1_k{k} = {f1:.4}").unwrap();
            }
            writeln!(s, "wasserstein = {:.4}", t.wasserstein).unwrap();
        }
        s
    }
}

/// Mean over tasks of `F1(K=to) − F1(K=from)`.
pub fn mean_f1_gain(at_from: &EvalReport, at_to: &EvalReport, from: usize, to: usize) -> Result<f64> {
    let names = |r: &EvalReport| r.tasks.iter().map(|t| t.task.clone()).collect::<BTreeSet<_>>();
    if names(at_from) != names(at_to) || at_from.tasks.is_empty() {
        return Err(Error::Input("F1 gain needs matching, nonempty task sets".into()));
    }
    let lookup = |r: &EvalReport, name: &str, k: usize| -> Result<f64> {
        r.task(name)
            .and_then(|t| t.f1.get(&k).copied())
            .ok_or_else(|| Error::Input(format!("task {name} has no F1 at K = {k}")))
    };
    let mut total = 0.0;
    for t in &at_from.tasks {
        total += lookup(at_to, &t.task, to)? - lookup(at_from, &t.task, from)?;
    }
    Ok(total / at_from.tasks.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainTable {
    /// `(model, Δ)` per model.
    pub rows: Vec<(String, f64)>,
    /// Second model's Δ minus the first's, when exactly two models are given.
    pub difference: Option<f64>,
}

/// K = 1 → K = 5 gain per model. Each entry is `(name, K=1 report, K=5 report)`.
pub fn f1_gain_table(models: &[(&str, &EvalReport, &EvalReport)]) -> Result<GainTable> {
    let rows = models
        .iter()
        .map(|(name, k1, k5)| Ok((name.to_string(), mean_f1_gain(k1, k5, 1, 5)?)))
        .collect::<Result<Vec<_>>>()?;
    let difference = (rows.len() == 2).then(|| rows[1].1 - rows[0].1);
    Ok(GainTable { rows, difference })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes_from(values: &[Vec<f64>]) -> Vec<SparseCode> {
        values.iter().map(|v| SparseCode::from_dense(v)).collect()
    }

    #[test]
    fn mse_examples() {
        let corpus = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]);
        assert_eq!(mse_with(&corpus, |x| Ok(x.to_vec())).unwrap(), 0.0);
        let shifted = mse_with(&corpus, |x| Ok(vec![x[0] + 0.5, x[1]])).unwrap();
        assert_eq!(shifted, 0.25);
        assert!(mse_with(&Matrix::zeros(0, 2), |x| Ok(x.to_vec())).is_err());
    }

    #[test]
    fn f1_arithmetic() {
        assert_eq!(f1_score(1, 1, 1), 0.5);
        assert_eq!(f1_score(3, 0, 0), 1.0);
        assert_eq!(f1_score(0, 2, 2), 0.0);
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein1(&[0.5, 1.5], &[1.5, 0.5]).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert!(wasserstein1(&[], &[1.0]).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let s = Split::seeded(103, 0.2, 4);
        assert_eq!(s.test.len(), 21);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(s, Split::seeded(103, 0.2, 4));
    }

    fn indicator_dataset(n: usize) -> (Vec<SparseCode>, Vec<u32>) {
        let labels: Vec<u32> = (0..n).map(|r| (r % 3 == 0) as u32).collect();
        let codes = codes_from(
            &labels
                .iter()
                .map(|&y| vec![0.0, y as f64, y as f64, 0.0])
                .collect::<Vec<_>>(),
        );
        (codes, labels)
    }

    #[test]
    fn selection_prefers_informative_then_lower_index() {
        let (codes, labels) = indicator_dataset(60);
        let split = Split::seeded(60, 0.2, 1);
        let ds = ProbeDataset::new(&codes, &labels, &split).unwrap();
        let ranked = select_features(&ds.train_view(), 1, 4).unwrap();
        assert_eq!(ranked, vec![1, 2, 0, 3]);
    }

    #[test]
    fn single_class_is_an_error() {
        let codes = codes_from(&[vec![1.0], vec![2.0]]);
        let labels = vec![1, 1];
        let split = Split {
            train: vec![0, 1],
            test: vec![],
        };
        let ds = ProbeDataset::new(&codes, &labels, &split).unwrap();
        assert!(select_features(&ds.train_view(), 1, 1).is_err());
    }

    #[test]
    fn separable_feature_gives_perfect_f1() {
        let (codes, labels) = indicator_dataset(200);
        let split = Split::seeded(200, 0.2, 2);
        let ds = ProbeDataset::new(&codes, &labels, &split).unwrap();
        assert_eq!(probe_f1(&ds, 1, &[1]).unwrap(), 1.0);
    }

    #[test]
    fn multiclass_is_macro_averaged() {
        let n = 300;
        let labels: Vec<u32> = (0..n).map(|r| (r % 3) as u32).collect();
        let codes = codes_from(
            &labels
                .iter()
                .map(|&y| (0..3).map(|c| (c == y) as u8 as f64).collect())
                .collect::<Vec<_>>(),
        );
        let split = Split::seeded(n, 0.2, 3);
        let ds = ProbeDataset::new(&codes, &labels, &split).unwrap();
        let rep = evaluate_task(&ds, "three", &[1]).unwrap();
        assert_eq!(rep.f1[&1], 1.0);
        assert_eq!(rep.features[0], 0);
        assert!(rep.wasserstein > 0.0);
    }

    #[test]
    fn gain_arithmetic() {
        let task = |name: &str, k1: f64, k5: f64| TaskReport {
            task: name.into(),
            features: vec![],
            f1: [(1, k1), (5, k5)].into_iter().collect(),
            wasserstein: 0.0,
        };
        let r = EvalReport::new(0.0, vec![task("a", 0.5, 0.52), task("b", 0.6, 0.64)]);
        assert!((mean_f1_gain(&r, &r, 1, 5).unwrap() - 0.03).abs() < 1e-12);
        assert_eq!(mean_f1_gain(&r, &r, 1, 1).unwrap(), 0.0);
        let other = EvalReport::new(0.0, vec![task("a", 0.5, 0.5)]);
        assert!(mean_f1_gain(&r, &other, 1, 5).is_err());
        let table = f1_gain_table(&[("sae", &r, &r), ("poly", &other, &other)]).unwrap();
        assert!((table.difference.unwrap() + 0.03).abs() < 1e-12);
    }

    #[test]
    fn report_text_uses_four_decimals() {
        let t = TaskReport {
            task: "pair_0_active".into(),
            features: vec![3, 1],
            f1: [(1, 0.123456)].into_iter().collect(),
            wasserstein: 2.0,
        };
        let text = EvalReport::new(1.0 / 3.0, vec![t]).to_text();
        assert!(text.contains("mse = 0.3333\n"));
        assert!(text.contains("f1_k1 = 0.1235\n"));
        assert!(text.contains("features = [3, 1]\n"));
    }
}
