// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparsification operators applied to post-ReLU pre-codes.
//!
//! Ties are always broken toward the lowest (flat) index, and only strictly
//! positive entries are ever kept.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sparsifier {
    #[serde(alias = "top_k")]
    TopK,
    #[serde(alias = "batch_topk", alias = "batch_top_k")]
    BatchTopK,
    Matryoshka,
}

impl Sparsifier {
    pub fn name(self) -> &'static str {
        match self {
            Sparsifier::TopK => "topk",
            Sparsifier::BatchTopK => "batchtopk",
            Sparsifier::Matryoshka => "matryoshka",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsifierSpec {
    pub kind: Sparsifier,
    pub k: usize,
    pub matryoshka_prefixes: Vec<usize>,
}

/// Descending by value, then ascending by index.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn largest_positive(mut entries: Vec<(f64, usize)>, keep: usize) -> Vec<usize> {
    entries.retain(|e| e.0 > 0.0);
    if entries.len() > keep {
        if keep == 0 {
            return Vec::new();
        }
        entries.select_nth_unstable_by(keep - 1, rank_order);
        entries.truncate(keep);
    }
    let mut idx: Vec<usize> = entries.into_iter().map(|e| e.1).collect();
    idx.sort_unstable();
    idx
}

/// Indices (ascending) of the entries `topk` keeps.
pub fn topk_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Input("top-k needs k > 0".into()));
    }
    let entries = v.iter().copied().zip(0..).collect();
    Ok(largest_positive(entries, k))
}

pub fn topk(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; v.len()];
    for i in topk_indices(v, k)? {
        out[i] = v[i];
    }
    Ok(out)
}

/// Flat indices (ascending) of the `n·k` entries kept across the batch.
pub fn batch_topk_indices(batch: &Matrix, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Input("batch top-k needs k > 0".into()));
    }
    let entries = batch.as_slice().iter().copied().zip(0..).collect();
    Ok(largest_positive(entries, batch.rows() * k))
}

pub fn batch_topk(batch: &Matrix, k: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(batch.rows(), batch.cols());
    let src = batch.as_slice();
    let dst = out.as_mut_slice();
    for i in batch_topk_indices(batch, k)? {
        dst[i] = src[i];
    }
    Ok(out)
}

/// Zeros every entry with index `>= prefix`.
pub fn matryoshka_prefix_mask(v: &[f64], prefix: usize) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(i, &x)| if i < prefix { x } else { 0.0 })
        .collect()
}

/// Nested prefix sizes `d_sae/16, d_sae/8, d_sae/4, d_sae/2, d_sae`, with
/// empty and repeated groups dropped.
pub fn default_matryoshka_prefixes(d_sae: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [16, 8, 4, 2, 1]
        .iter()
        .map(|div| d_sae / div)
        .filter(|&p| p > 0)
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn topk_examples() {
        assert_eq!(topk(&[3.0, 1.0, 2.0], 2).unwrap(), vec![3.0, 0.0, 2.0]);
        assert_eq!(topk(&[1.0, 1.0, 0.0], 1).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(topk(&[0.0, 0.0, 0.0], 2).unwrap(), vec![0.0; 3]);
        assert!(topk(&[1.0], 0).is_err());
    }

    #[test]
    fn batch_topk_examples() {
        let b = Matrix::from_rows(&[&[3.0, 0.0], &[1.0, 2.0]]);
        assert_eq!(
            batch_topk(&b, 1).unwrap(),
            Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 2.0]])
        );
        assert_eq!(batch_topk(&Matrix::zeros(3, 4), 2).unwrap(), Matrix::zeros(3, 4));
        assert!(batch_topk(&b, 0).is_err());
    }

    #[test]
    fn batch_ties_prefer_lower_flat_index() {
        let b = Matrix::from_rows(&[&[1.0, 5.0], &[1.0, 1.0]]);
        assert_eq!(
            batch_topk(&b, 1).unwrap(),
            Matrix::from_rows(&[&[1.0, 5.0], &[0.0, 0.0]])
        );
    }

    #[test]
    fn prefix_mask_examples() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(matryoshka_prefix_mask(&v, 3), v.to_vec());
        assert_eq!(matryoshka_prefix_mask(&v, 2), vec![1.0, 2.0, 0.0]);
        assert_eq!(matryoshka_prefix_mask(&v, 0), vec![0.0; 3]);
    }

    #[test]
    fn default_prefixes() {
        assert_eq!(default_matryoshka_prefixes(128), vec![8, 16, 32, 64, 128]);
        assert_eq!(default_matryoshka_prefixes(4), vec![1, 2, 4]);
    }

    proptest! {
        #[test]
        fn topk_invariants(v in prop::collection::vec(0.0f64..10.0, 1..40), k in 1usize..10) {
            let out = topk(&v, k).unwrap();
            let nnz = out.iter().filter(|x| **x != 0.0).count();
            prop_assert!(nnz <= k);
            for (o, x) in out.iter().zip(&v) {
                prop_assert!(*o == 0.0 || o == x);
            }
            prop_assert_eq!(topk(&out, k).unwrap(), out);
        }

        #[test]
        fn masks_nest(v in prop::collection::vec(-5.0f64..5.0, 0..20), a in 0usize..25, b in 0usize..25) {
            let twice = matryoshka_prefix_mask(&matryoshka_prefix_mask(&v, a), b);
            prop_assert_eq!(twice, matryoshka_prefix_mask(&v, a.min(b)));
        }
    }
}
