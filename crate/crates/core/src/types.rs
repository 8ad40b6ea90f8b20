//! Shared domain types: embedding matrices, identity labels, grouped batches
//! and distance lists.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};

/// Dense row-major matrix of feature vectors, one row per sample.
///
/// Every element is finite; constructors reject NaN and infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(invalid(format!(
                "matrix data has {} values, expected {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { data, rows, dim })
    }

    /// Skips the finiteness scan. Callers inside the crate use this for
    /// buffers produced by arithmetic on already-validated inputs.
    pub(crate) fn from_raw(rows: usize, dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * dim);
        Self { data, rows, dim }
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self::from_raw(rows, dim, vec![0.0; rows * dim])
    }

    /// An empty matrix with a fixed width.
    pub fn empty(dim: usize) -> Self {
        Self::from_raw(0, dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(invalid("from_rows needs at least one row to infer the width"));
        };
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim(dim, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on a zero width would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.dim, data)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.rows, self.dim, self.data.iter().map(|v| v * c).collect())
    }
}

/// Identity index of a sample. Bounded by the dataset's identity count,
/// which is checked where that count is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IdentityLabel(pub u32);

impl IdentityLabel {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for IdentityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "id{}", self.0)
    }
}

/// A batch of `groups` identities with `per_group` instances each.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedBatch {
    features: EmbeddingMatrix,
    labels: Vec<IdentityLabel>,
    groups: usize,
    per_group: usize,
}

impl GroupedBatch {
    pub fn new(
        features: EmbeddingMatrix,
        labels: Vec<IdentityLabel>,
        groups: usize,
        per_group: usize,
    ) -> Result<Self> {
        if groups < 2 || per_group < 2 {
            return Err(invalid(format!(
                "grouped batch needs at least 2 groups of 2, got {groups}x{per_group}"
            )));
        }
        if features.rows() != groups * per_group || labels.len() != features.rows() {
            return Err(invalid(format!(
                "batch of {groups}x{per_group} has {} rows and {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let mut counts: BTreeMap<IdentityLabel, usize> = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_default() += 1;
        }
        if counts.len() != groups || counts.values().any(|&c| c != per_group) {
            return Err(invalid(format!(
                "batch must hold exactly {groups} distinct identities with {per_group} rows each"
            )));
        }
        Ok(Self { features, labels, groups, per_group })
    }

    pub fn features(&self) -> &EmbeddingMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[IdentityLabel] {
        &self.labels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn per_group(&self) -> usize {
        self.per_group
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Distances from one query to a set of samples, with the source index of
/// each value kept alongside.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistanceList {
    values: Vec<f64>,
    sample_indices: Vec<usize>,
    sorted: bool,
}

impl DistanceList {
    /// Builds a list whose sample indices are `0..values.len()`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let idx = (0..values.len()).collect();
        Self::with_indices(values, idx)
    }

    pub fn with_indices(values: Vec<f64>, sample_indices: Vec<usize>) -> Result<Self> {
        if values.len() != sample_indices.len() {
            return Err(invalid("distance values and sample indices differ in length"));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("distances must be finite and non-negative, got {v}")));
        }
        Ok(Self { values, sample_indices, sorted: false })
    }

    pub(crate) fn from_raw(values: Vec<f64>, sample_indices: Vec<usize>) -> Self {
        Self { values, sample_indices, sorted: false }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample_indices(&self) -> &[usize] {
        &self.sample_indices
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    /// Sorts ascending by value; equal values keep ascending sample index.
    pub fn sort(&mut self) {
        if self.sorted {
            return;
        }
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_unstable_by(|&a, &b| {
            self.values[a]
                .total_cmp(&self.values[b])
                .then(self.sample_indices[a].cmp(&self.sample_indices[b]))
        });
        self.values = order.iter().map(|&i| self.values[i]).collect();
        self.sample_indices = order.iter().map(|&i| self.sample_indices[i]).collect();
        self.sorted = true;
    }

    pub fn sorted(mut self) -> Self {
        self.sort();
        self
    }

    pub(crate) fn check_sorted(&self) -> bool {
        self.values
            .windows(2)
            .all(|w| w[0].partial_cmp(&w[1]) != Some(Ordering::Greater))
    }
}

/// Dissimilarity used for loss computation and retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    /// Negative cosine similarity. Inside distance lists it is offset by +1
    /// so values stay in `[0, 2]`.
    NegCosine,
}

impl std::str::FromStr for Metric {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "neg_cosine" | "cosine" => Ok(Metric::NegCosine),
            other => Err(invalid(format!("unknown metric '{other}'"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::NegCosine => "neg_cosine",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rejects_bad_shapes_and_nan() {
        assert!(EmbeddingMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert_eq!(m.select_rows(&[1, 0]).as_slice(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn grouped_batch_validates_group_structure() {
        let feats = EmbeddingMatrix::zeros(4, 2);
        let l = |v: &[u32]| v.iter().map(|&x| IdentityLabel(x)).collect::<Vec<_>>();
        assert!(GroupedBatch::new(feats.clone(), l(&[0, 0, 1, 1]), 2, 2).is_ok());
        assert!(GroupedBatch::new(feats.clone(), l(&[0, 0, 0, 1]), 2, 2).is_err());
        assert!(GroupedBatch::new(feats.clone(), l(&[0, 1, 2, 3]), 2, 2).is_err());
        assert!(GroupedBatch::new(EmbeddingMatrix::zeros(2, 2), l(&[0, 1]), 2, 1).is_err());
    }

    #[test]
    fn distance_list_sort_breaks_ties_by_index() {
        let d = DistanceList::with_indices(vec![2.0, 1.0, 1.0], vec![0, 7, 3]).unwrap().sorted();
        assert_eq!(d.values(), &[1.0, 1.0, 2.0]);
        assert_eq!(d.sample_indices(), &[3, 7, 0]);
        assert!(d.is_sorted());
        assert!(DistanceList::new(vec![-1.0]).is_err());
    }
}
