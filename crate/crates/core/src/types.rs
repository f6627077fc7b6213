//! Shared data vocabulary: per-pixel probability fields, label fields,
//! feature fields and dataset splits.
//!
//! All grids are row-major. A `ProbabilityMap` stores one length-K simplex
//! vector per pixel, a `LabelMap` one class index per pixel, a `FeatureMap`
//! one d-dimensional real vector per pixel. Values are immutable after
//! construction; the training engine replaces whole objects rather than
//! mutating them in place.

use crate::error::{Error, Result};

/// Simplex tolerance used by validity checks throughout the crate.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Minimum entry enforced when a distribution-matrix row is stored, so the
/// element-wise divisions in the alignment transform are always defined.
pub const EPS_FLOOR: f64 = 1e-8;

/// H×W field of per-pixel class probability vectors (length K each).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Row-major, pixel-contiguous: `values[(r*width + c)*classes + k]`.
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * classes {
            return Err(Error::ShapeMismatch {
                left: format!("{} values", values.len()),
                right: format!("{height}x{width}x{classes}"),
                context: "ProbabilityMap::new",
            });
        }
        Ok(Self { height, width, classes, values })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// The probability vector of one pixel (flat pixel index).
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.classes..(p + 1) * self.classes]
    }
}

/// H×W field of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, one class index per pixel. Stored as bytes so a map can
    /// round-trip through the one-byte-per-pixel PGM interchange format.
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                left: format!("{} labels", labels.len()),
                right: format!("{height}x{width}"),
                context: "LabelMap::new",
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn label(&self, p: usize) -> usize {
        self.labels[p] as usize
    }

    /// Checks every label is `< classes`.
    pub fn validate_for(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(&l) => Err(Error::InvalidLabel { label: l as usize, classes }),
            None => Ok(()),
        }
    }
}

/// H×W field of d-dimensional per-pixel feature vectors.
///
/// Pixel batches sampled during training reuse this type with `height = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Row-major, pixel-contiguous: `values[(r*width + c)*dim + j]`.
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * dim {
            return Err(Error::ShapeMismatch {
                left: format!("{} values", values.len()),
                right: format!("{height}x{width}x{dim}"),
                context: "FeatureMap::new",
            });
        }
        Ok(Self { height, width, dim, values })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.dim..(p + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One labeled image: features plus ground-truth labels.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub features: FeatureMap,
    pub labels: LabelMap,
}

/// One unlabeled image: features, plus ground truth that is reserved for
/// evaluation and must never feed a training operation.
#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    pub features: FeatureMap,
    hidden_truth: LabelMap,
}

impl UnlabeledSample {
    pub fn new(features: FeatureMap, hidden_truth: LabelMap) -> Self {
        Self { features, hidden_truth }
    }

    /// Evaluation-only accessor for the held-back ground truth.
    pub fn hidden_truth_for_eval(&self) -> &LabelMap {
        &self.hidden_truth
    }

    /// Replaces the hidden ground truth. Exists so tests can poison it and
    /// assert the training trajectory does not change.
    pub fn replace_hidden_truth(&mut self, truth: LabelMap) {
        self.hidden_truth = truth;
    }
}

/// A dataset split into labeled and unlabeled samples.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub classes: usize,
    pub feature_dim: usize,
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<UnlabeledSample>,
}

impl DatasetSplit {
    /// The evaluation view: unlabeled features paired with their hidden truth.
    pub fn eval_set(&self) -> Vec<(&FeatureMap, &LabelMap)> {
        self.unlabeled
            .iter()
            .map(|s| (&s.features, s.hidden_truth_for_eval()))
            .collect()
    }
}

/// Which side of the data a distribution matrix tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixRole {
    Labeled,
    Unlabeled,
}

/// K×K matrix of class-conditional marginal prediction distributions.
/// Row i is the running distribution of predictions over pixels assigned
/// to class i; every stored row is a floored simplex vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionMatrix {
    pub classes: usize,
    pub role: MatrixRole,
    rows: Vec<f64>,
}

impl DistributionMatrix {
    /// Uniform rows: 1/K everywhere.
    pub fn uniform(classes: usize, role: MatrixRole) -> Self {
        assert!(classes >= 2);
        Self { classes, role, rows: vec![1.0 / classes as f64; classes * classes] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.classes..(i + 1) * self.classes]
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.rows[i * self.classes + i]
    }

    /// Stores a row after flooring entries at [`EPS_FLOOR`] and
    /// renormalizing to the simplex.
    pub fn set_row(&mut self, i: usize, row: &[f64]) {
        assert_eq!(row.len(), self.classes);
        let mut r = row.to_vec();
        floor_and_renormalize(&mut r, EPS_FLOOR);
        self.rows[i * self.classes..(i + 1) * self.classes].copy_from_slice(&r);
    }

    /// True when every row sums to 1 within [`SIMPLEX_TOL`] with entries in
    /// [[`EPS_FLOOR`], 1].
    pub fn rows_are_simplex(&self) -> bool {
        (0..self.classes).all(|i| {
            let r = self.row(i);
            let s: f64 = r.iter().sum();
            (s - 1.0).abs() <= SIMPLEX_TOL && r.iter().all(|&x| x >= EPS_FLOOR && x <= 1.0)
        })
    }
}

/// Projects a nonnegative vector onto the simplex with every entry at least
/// `eps`: normalize, then repeatedly pin sub-floor entries to `eps` and
/// rescale the rest to the remaining mass. The pinned set only grows, so
/// this terminates in at most K passes.
pub fn floor_and_renormalize(row: &mut [f64], eps: f64) {
    let k = row.len();
    assert!(k as f64 * eps < 1.0);
    for v in row.iter_mut() {
        if !v.is_finite() || *v < 0.0 {
            *v = 0.0;
        }
    }
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        row.fill(1.0 / k as f64);
        return;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    let mut pinned = vec![false; k];
    loop {
        let mut changed = false;
        for (i, v) in row.iter_mut().enumerate() {
            if !pinned[i] && *v < eps {
                *v = eps;
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return;
        }
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let free_mass = 1.0 - n_pinned as f64 * eps;
        let free_sum: f64 = row
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(v, _)| *v)
            .sum();
        if free_sum <= 0.0 {
            // everything pinned or no free mass left; spread the remainder
            let free = pinned.iter().filter(|&&p| !p).count();
            if free == 0 {
                return;
            }
            for (v, &p) in row.iter_mut().zip(&pinned) {
                if !p {
                    *v = free_mass / free as f64;
                }
            }
            return;
        }
        let scale = free_mass / free_sum;
        for (v, &p) in row.iter_mut().zip(&pinned) {
            if !p {
                *v *= scale;
            }
        }
    }
}

/// Outcome of `validate_probability_map`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityReport {
    /// max over pixels of |sum(vector) - 1|
    pub max_simplex_deviation: f64,
    pub min_entry: f64,
    pub max_entry: f64,
    pub passed: bool,
}

/// Reports how far a map is from being a field of simplex vectors.
///
/// Passes iff every entry is in [0, 1], every pixel sums to 1 within
/// [`SIMPLEX_TOL`], and K >= 2.
pub fn validate_probability_map(map: &ProbabilityMap) -> ValidityReport {
    let mut max_dev: f64 = 0.0;
    let mut min_entry = f64::INFINITY;
    let mut max_entry = f64::NEG_INFINITY;
    for p in 0..map.pixels() {
        let v = map.pixel(p);
        let s: f64 = v.iter().sum();
        max_dev = max_dev.max((s - 1.0).abs());
        for &x in v {
            min_entry = min_entry.min(x);
            max_entry = max_entry.max(x);
        }
    }
    if map.pixels() == 0 {
        min_entry = 0.0;
        max_entry = 0.0;
    }
    let passed = map.classes >= 2
        && max_dev <= SIMPLEX_TOL
        && min_entry >= 0.0
        && max_entry <= 1.0
        && min_entry.is_finite()
        && max_entry.is_finite()
        && max_dev.is_finite();
    ValidityReport { max_simplex_deviation: max_dev, min_entry, max_entry, passed }
}

/// Expands class indices into one-hot probability vectors.
pub fn one_hot(labels: &LabelMap, classes: usize) -> Result<ProbabilityMap> {
    labels.validate_for(classes)?;
    let mut values = vec![0.0; labels.pixels() * classes];
    for p in 0..labels.pixels() {
        values[p * classes + labels.label(p)] = 1.0;
    }
    ProbabilityMap::new(labels.height, labels.width, classes, values)
}

/// Index of the largest entry; ties break toward the lowest class index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Per-pixel argmax of a probability map.
pub fn argmax_labels(map: &ProbabilityMap) -> LabelMap {
    debug_assert!(map.classes <= u8::MAX as usize + 1);
    let labels = (0..map.pixels()).map(|p| argmax(map.pixel(p)) as u8).collect();
    LabelMap { height: map.height, width: map.width, labels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(vectors: &[&[f64]]) -> ProbabilityMap {
        let k = vectors[0].len();
        let values: Vec<f64> = vectors.iter().flat_map(|v| v.iter().copied()).collect();
        ProbabilityMap::new(1, vectors.len(), k, values).unwrap()
    }

    #[test]
    fn uniform_map_passes_with_zero_deviation() {
        let m = map_from(&[&[0.25; 4], &[0.25; 4]]);
        let r = validate_probability_map(&m);
        assert!(r.passed);
        assert_eq!(r.max_simplex_deviation, 0.0);
        assert_eq!(r.min_entry, 0.25);
        assert_eq!(r.max_entry, 0.25);
    }

    #[test]
    fn off_simplex_vector_fails_with_reported_deviation() {
        let m = map_from(&[&[0.5, 0.6]]);
        let r = validate_probability_map(&m);
        assert!(!r.passed);
        assert!((r.max_simplex_deviation - 0.1).abs() < 1e-12);
    }

    #[test]
    fn negative_entry_fails_on_range() {
        let m = map_from(&[&[-0.1, 1.1]]);
        let r = validate_probability_map(&m);
        assert!(!r.passed);
        assert_eq!(r.min_entry, -0.1);
        assert_eq!(r.max_entry, 1.1);
    }

    #[test]
    fn single_class_map_fails() {
        let m = map_from(&[&[1.0]]);
        assert!(!validate_probability_map(&m).passed);
    }

    #[test]
    fn one_hot_definition() {
        let labels = LabelMap::new(1, 1, vec![2]).unwrap();
        let m = one_hot(&labels, 4).unwrap();
        assert_eq!(m.pixel(0), &[0.0, 0.0, 1.0, 0.0]);

        let labels = LabelMap::new(1, 1, vec![0]).unwrap();
        let m = one_hot(&labels, 2).unwrap();
        assert_eq!(m.pixel(0), &[1.0, 0.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range_label() {
        let labels = LabelMap::new(1, 1, vec![5]).unwrap();
        match one_hot(&labels, 4) {
            Err(Error::InvalidLabel { label: 5, classes: 4 }) => {}
            other => panic!("expected invalid-label error, got {other:?}"),
        }
    }

    #[test]
    fn argmax_labels_definition_and_tie_break() {
        let m = map_from(&[&[0.1, 0.7, 0.2], &[0.2, 0.3, 0.5]]);
        assert_eq!(argmax_labels(&m).labels, vec![1, 2]);
        let tie = map_from(&[&[0.5, 0.5]]);
        assert_eq!(argmax_labels(&tie).labels, vec![0]);
    }
}
