//! Class-wise distribution bookkeeping and the alignment transform.
//!
//! Each model owns two K×K matrices: `M^l` tracks, per class i, the running
//! mean prediction over labeled pixels whose ground truth is i; `M^u` tracks
//! the same over unlabeled pixels whose raw pseudo-label is i. Rows update by
//! exponential moving average with momentum `alpha`, so a row approximates
//! the average of the last 1/(1-alpha) batch statistics.
//!
//! A prediction F with raw argmax i is aligned by
//!
//! ```text
//! F' = Normalize( F ⊗ (M^l_i)^tau_i ⊘ M^u_i ),    tau_i = 1 - M^l_ii
//! ```
//!
//! and the over-expectation threshold for class i is the diagonal `M^u_ii`.
//! When a class is absent from a batch's pseudo-labels, its `M^u` row falls
//! back to the inverse transform `M^l_i × E[M^u_i ⊘ M^l_i]`; under
//! renormalization the scalar expectation cancels, so the fallback collapses
//! to `M^l_i`. The collapse is kept as written.

use crate::error::{Error, Result};
use crate::types::{
    argmax, argmax_labels, DistributionMatrix, LabelMap, MatrixRole, ProbabilityMap, EPS_FLOOR,
};

/// Where a pixel's mask confidence comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfidenceSource {
    /// max of the raw prediction (the default reading of the filter).
    #[default]
    Raw,
    /// max of the aligned prediction.
    Aligned,
}

/// Per-model alignment state: the matrix pair plus the EMA momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    pub labeled: DistributionMatrix,
    pub unlabeled: DistributionMatrix,
    pub alpha: f64,
    /// Counts uses of the absent-class fallback branch (instrumentation;
    /// not serialized).
    pub fallback_uses: u64,
}

/// Output bundle of [`AlignmentState::align_map`].
#[derive(Debug, Clone)]
pub struct AlignedMap {
    pub aligned: ProbabilityMap,
    /// argmax of the aligned prediction, the cross-supervision target class.
    pub pseudo_labels: LabelMap,
    /// per-pixel confidence used by the over-expectation mask.
    pub confidence: Vec<f64>,
    /// true where confidence exceeds the pseudo-label class threshold.
    pub mask: Vec<bool>,
}

impl AlignedMap {
    pub fn mask_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// EMA blend: `alpha * prev + (1 - alpha) * batch`, componentwise.
pub fn ema_blend(prev: &[f64], batch: &[f64], alpha: f64) -> Vec<f64> {
    prev.iter()
        .zip(batch)
        .map(|(&p, &b)| alpha * p + (1.0 - alpha) * b)
        .collect()
}

/// The row-level alignment transform
/// `Normalize( prob ⊗ labeled_row^tau ⊘ unlabeled_row )`.
pub fn align_rows(prob: &[f64], labeled_row: &[f64], unlabeled_row: &[f64], tau: f64) -> Vec<f64> {
    let mut out: Vec<f64> = prob
        .iter()
        .zip(labeled_row)
        .zip(unlabeled_row)
        .map(|((&f, &l), &u)| f * l.powf(tau) / u)
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Conditional mean of `probs` over pixels where `select` holds; `None` when
/// no pixel is selected.
fn conditional_mean(
    probs: &ProbabilityMap,
    select: impl Fn(usize) -> bool,
) -> Option<Vec<f64>> {
    let k = probs.classes;
    let mut sum = vec![0.0; k];
    let mut count = 0usize;
    for p in 0..probs.pixels() {
        if select(p) {
            for (s, &v) in sum.iter_mut().zip(probs.pixel(p)) {
                *s += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    for s in &mut sum {
        *s /= count as f64;
    }
    Some(sum)
}

impl AlignmentState {
    /// Unbiased start: uniform rows, so early alignment is near identity.
    pub fn uniform(classes: usize, alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha < 1.0);
        Self {
            labeled: DistributionMatrix::uniform(classes, MatrixRole::Labeled),
            unlabeled: DistributionMatrix::uniform(classes, MatrixRole::Unlabeled),
            alpha,
            fallback_uses: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.labeled.classes
    }

    /// Adaptive temperature `tau_i = 1 - M^l_ii`.
    pub fn temperature(&self, class: usize) -> f64 {
        1.0 - self.labeled.diagonal(class)
    }

    /// Over-expectation threshold `t(i) = M^u_ii`.
    pub fn dynamic_threshold(&self, class: usize) -> f64 {
        self.unlabeled.diagonal(class)
    }

    pub fn dynamic_thresholds(&self) -> Vec<f64> {
        (0..self.classes()).map(|i| self.dynamic_threshold(i)).collect()
    }

    /// EMA update of labeled row i from pixels whose ground truth is i.
    /// A class absent from the batch leaves its row untouched.
    pub fn update_labeled_row(&mut self, probs: &ProbabilityMap, labels: &LabelMap, class: usize) {
        assert_eq!(probs.pixels(), labels.pixels());
        assert_eq!(probs.classes, self.classes());
        if let Some(mean) = conditional_mean(probs, |p| labels.label(p) == class) {
            let blended = ema_blend(self.labeled.row(class), &mean, self.alpha);
            self.labeled.set_row(class, &blended);
        }
    }

    /// EMA update of unlabeled row i from pixels whose raw pseudo-label is i,
    /// with the inverse-transform fallback when the class is absent.
    pub fn update_unlabeled_row(
        &mut self,
        probs: &ProbabilityMap,
        pseudo_labels: &LabelMap,
        class: usize,
    ) {
        assert_eq!(probs.pixels(), pseudo_labels.pixels());
        assert_eq!(probs.classes, self.classes());
        match conditional_mean(probs, |p| pseudo_labels.label(p) == class) {
            Some(mean) => {
                let blended = ema_blend(self.unlabeled.row(class), &mean, self.alpha);
                self.unlabeled.set_row(class, &blended);
            }
            None => {
                self.fallback_uses += 1;
                let l_row = self.labeled.row(class);
                let u_row = self.unlabeled.row(class);
                // mean over components of M^u_i / M^l_i, skipping floored
                // labeled entries; any positive scalar cancels under the
                // renormalization in set_row.
                let mut ratio_sum = 0.0;
                let mut n = 0usize;
                for (&u, &l) in u_row.iter().zip(l_row) {
                    if l > EPS_FLOOR {
                        ratio_sum += u / l;
                        n += 1;
                    }
                }
                let scalar = if n == 0 { 1.0 } else { ratio_sum / n as f64 };
                let row: Vec<f64> = l_row.iter().map(|&l| l * scalar).collect();
                self.unlabeled.set_row(class, &row);
            }
        }
    }

    /// Updates every labeled row from one batch.
    pub fn update_labeled(&mut self, probs: &ProbabilityMap, labels: &LabelMap) {
        for i in 0..self.classes() {
            self.update_labeled_row(probs, labels, i);
        }
    }

    /// Updates every unlabeled row from one batch. Pseudo-labels must be the
    /// argmax of the raw (pre-alignment) predictions.
    pub fn update_unlabeled(&mut self, probs: &ProbabilityMap, pseudo_labels: &LabelMap) {
        for i in 0..self.classes() {
            self.update_unlabeled_row(probs, pseudo_labels, i);
        }
    }

    /// Aligns one pixel's prediction; `class` must be its raw argmax, which
    /// selects the matrix rows.
    pub fn align_prediction(&self, prob: &[f64], class: usize) -> Vec<f64> {
        align_rows(
            prob,
            self.labeled.row(class),
            self.unlabeled.row(class),
            self.temperature(class),
        )
    }

    /// Aligns a whole map and derives pseudo-labels, confidences and the
    /// over-expectation mask.
    ///
    /// Per pixel: the raw argmax selects the alignment row, the aligned
    /// argmax is the pseudo-label, confidence comes from `conf` and the mask
    /// passes when confidence exceeds `thresholds[pseudo_label]`.
    pub fn align_map(
        &self,
        map: &ProbabilityMap,
        conf: ConfidenceSource,
        thresholds: &[f64],
    ) -> AlignedMap {
        let k = self.classes();
        assert_eq!(map.classes, k);
        assert_eq!(thresholds.len(), k);
        // Per-class factor rows: (M^l_i)^tau_i / M^u_i.
        let factors: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let tau = self.temperature(i);
                self.labeled
                    .row(i)
                    .iter()
                    .zip(self.unlabeled.row(i))
                    .map(|(&l, &u)| l.powf(tau) / u)
                    .collect()
            })
            .collect();

        let n = map.pixels();
        let mut aligned = vec![0.0; n * k];
        let mut pseudo = vec![0u8; n];
        let mut confidence = vec![0.0; n];
        let mut mask = vec![false; n];
        for p in 0..n {
            let raw = map.pixel(p);
            let row = argmax(raw);
            let out = &mut aligned[p * k..(p + 1) * k];
            let mut sum = 0.0;
            for ((o, &f), &c) in out.iter_mut().zip(raw).zip(&factors[row]) {
                *o = f * c;
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
            let y = argmax(out);
            pseudo[p] = y as u8;
            let conf_val = match conf {
                ConfidenceSource::Raw => raw[row],
                ConfidenceSource::Aligned => out[y],
            };
            confidence[p] = conf_val;
            mask[p] = conf_val > thresholds[y];
        }
        AlignedMap {
            aligned: ProbabilityMap {
                height: map.height,
                width: map.width,
                classes: k,
                values: aligned,
            },
            pseudo_labels: LabelMap { height: map.height, width: map.width, labels: pseudo },
            confidence,
            mask,
        }
    }

    /// Plain text dump: a `K alpha` header line, then the K rows of `M^l`
    /// followed by the K rows of `M^u`, 17 significant digits each.
    pub fn to_text(&self) -> String {
        let k = self.classes();
        let mut s = format!("{k} {:.16e}\n", self.alpha);
        for m in [&self.labeled, &self.unlabeled] {
            for i in 0..k {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Format { format: "alignment dump", reason: reason.into() };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("missing header"))?;
        let mut it = header.split_whitespace();
        let k: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad class count"))?;
        let alpha: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad alpha"))?;
        if k < 2 || !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
            return Err(bad("header out of range"));
        }
        let mut state = Self::uniform(k, alpha);
        for (idx, m) in [MatrixRole::Labeled, MatrixRole::Unlabeled].into_iter().enumerate() {
            for i in 0..k {
                let line = lines.next().ok_or_else(|| bad("missing row"))?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| bad("bad entry")))
                    .collect::<Result<_>>()?;
                if row.len() != k {
                    return Err(bad("row length mismatch"));
                }
                let target = if idx == 0 { &mut state.labeled } else { &mut state.unlabeled };
                debug_assert_eq!(target.role, m);
                target.set_row(i, &row);
            }
        }
        Ok(state)
    }
}

// ---------------------------------------------------------------------------
// Naive overall distribution alignment (single-vector baseline)
// ---------------------------------------------------------------------------

/// The single-distribution baseline: one labeled class distribution (the
/// empirical ground-truth frequencies) over one running average of unlabeled
/// predictions; no per-class rows, no temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveDAState {
    labeled: Vec<f64>,
    unlabeled: Vec<f64>,
    pub alpha: f64,
}

impl NaiveDAState {
    pub fn new(labeled_dist: &[f64], alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha < 1.0);
        let mut labeled = labeled_dist.to_vec();
        crate::types::floor_and_renormalize(&mut labeled, EPS_FLOOR);
        let k = labeled.len();
        Self { labeled, unlabeled: vec![1.0 / k as f64; k], alpha }
    }

    pub fn labeled_dist(&self) -> &[f64] {
        &self.labeled
    }

    pub fn unlabeled_dist(&self) -> &[f64] {
        &self.unlabeled
    }

    /// EMA update of the running unlabeled prediction distribution from one
    /// batch's mean prediction vector.
    pub fn update_unlabeled(&mut self, batch_mean: &[f64]) {
        let mut blended = ema_blend(&self.unlabeled, batch_mean, self.alpha);
        crate::types::floor_and_renormalize(&mut blended, EPS_FLOOR);
        self.unlabeled = blended;
    }

    pub fn align_prediction(&self, prob: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = prob
            .iter()
            .zip(&self.labeled)
            .zip(&self.unlabeled)
            .map(|((&f, &l), &u)| f * l / u)
            .collect();
        let sum: f64 = out.iter().sum();
        for v in &mut out {
            *v /= sum;
        }
        out
    }

    /// Rescales every pixel by `labeled ⊘ unlabeled` and renormalizes.
    pub fn align_map(&self, map: &ProbabilityMap) -> ProbabilityMap {
        let k = map.classes;
        assert_eq!(k, self.labeled.len());
        let mut values = vec![0.0; map.values.len()];
        for p in 0..map.pixels() {
            let out = self.align_prediction(map.pixel(p));
            values[p * k..(p + 1) * k].copy_from_slice(&out);
        }
        ProbabilityMap { height: map.height, width: map.width, classes: k, values }
    }
}

/// Pseudo-labels as the argmax of raw predictions (the row-selection rule).
pub fn raw_pseudo_labels(map: &ProbabilityMap) -> LabelMap {
    argmax_labels(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_probability_map;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(vectors: &[&[f64]]) -> ProbabilityMap {
        let k = vectors[0].len();
        let values: Vec<f64> = vectors.iter().flat_map(|v| v.iter().copied()).collect();
        ProbabilityMap::new(1, vectors.len(), k, values).unwrap()
    }

    fn labels(v: &[u8]) -> LabelMap {
        LabelMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn labeled_update_fixed_point() {
        let mut st = AlignmentState::uniform(2, 0.9);
        st.labeled.set_row(0, &[0.5, 0.5]);
        let probs = batch(&[&[0.5, 0.5], &[0.5, 0.5]]);
        st.update_labeled_row(&probs, &labels(&[0, 0]), 0);
        assert_eq!(st.labeled.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn labeled_update_blend_after_flooring() {
        let mut st = AlignmentState::uniform(2, 0.9);
        st.labeled.set_row(0, &[1.0, 0.0]); // floored to ~(1, 1e-8)
        let probs = batch(&[&[0.6, 0.4]]);
        st.update_labeled_row(&probs, &labels(&[0]), 0);
        let row = st.labeled.row(0);
        assert!((row[0] - 0.96).abs() < 1e-7, "{row:?}");
        assert!((row[1] - 0.04).abs() < 1e-7, "{row:?}");
    }

    #[test]
    fn labeled_update_skips_absent_class() {
        let mut st = AlignmentState::uniform(3, 0.9);
        st.labeled.set_row(1, &[0.2, 0.5, 0.3]);
        let before = st.labeled.row(1).to_vec();
        let probs = batch(&[&[0.9, 0.05, 0.05]]);
        st.update_labeled_row(&probs, &labels(&[0]), 1);
        assert_eq!(st.labeled.row(1), &before[..]);
    }

    #[test]
    fn unlabeled_update_nonempty_branch() {
        let mut st = AlignmentState::uniform(2, 0.99);
        st.unlabeled.set_row(1, &[0.2, 0.8]);
        let probs = batch(&[&[0.4, 0.6]]);
        st.update_unlabeled_row(&probs, &labels(&[1]), 1);
        let row = st.unlabeled.row(1);
        assert!((row[0] - 0.202).abs() < 1e-12);
        assert!((row[1] - 0.798).abs() < 1e-12);
        assert_eq!(st.fallback_uses, 0);
    }

    #[test]
    fn unlabeled_fallback_collapses_to_labeled_row() {
        let mut st = AlignmentState::uniform(3, 0.9);
        st.labeled.set_row(0, &[0.6, 0.3, 0.1]);
        st.unlabeled.set_row(0, &[0.3, 0.3, 0.4]);
        let probs = batch(&[&[0.1, 0.8, 0.1]]);
        st.update_unlabeled_row(&probs, &labels(&[1]), 0); // class 0 absent
        let row = st.unlabeled.row(0);
        assert!((row[0] - 0.6).abs() < 1e-9, "{row:?}");
        assert!((row[1] - 0.3).abs() < 1e-9);
        assert!((row[2] - 0.1).abs() < 1e-9);
        assert_eq!(st.fallback_uses, 1);
        // threshold after the collapse reads the labeled diagonal
        assert!((st.dynamic_threshold(0) - 0.6).abs() < 1e-9);
    }

    #[test]
    fn temperature_examples() {
        let mut st = AlignmentState::uniform(4, 0.9);
        assert!((st.temperature(0) - 0.75).abs() < 1e-12); // uniform row, K=4
        st.labeled.set_row(1, &[0.2, 0.3, 0.3, 0.2]);
        assert!((st.temperature(1) - 0.7).abs() < 1e-12);
        st.labeled.set_row(2, &[0.0, 0.0, 1.0, 0.0]); // floored near 1
        assert!(st.temperature(2).abs() < 1e-7);
        assert!(st.temperature(2) >= 0.0);
    }

    #[test]
    fn dynamic_threshold_is_a_diagonal_lookup() {
        let mut st = AlignmentState::uniform(5, 0.9);
        assert!((st.dynamic_threshold(3) - 0.2).abs() < 1e-12); // uniform, K=5
        st.unlabeled.set_row(2, &[0.15, 0.1, 0.55, 0.1, 0.1]);
        assert_eq!(st.dynamic_threshold(2), st.unlabeled.diagonal(2));
        assert!((st.dynamic_threshold(2) - 0.55).abs() < 1e-9);
    }

    #[test]
    fn align_rows_identity_when_matched_and_tau_one() {
        let f = [0.6, 0.3, 0.1];
        let row = [0.5, 0.3, 0.2];
        let out = align_rows(&f, &row, &row, 1.0);
        for (o, e) in out.iter().zip(&f) {
            assert!((o - e).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn align_rows_matches_hand_computation() {
        let out = align_rows(&[0.6, 0.3, 0.1], &[0.5, 0.3, 0.2], &[0.7, 0.2, 0.1], 0.5);
        let expect = [0.3232679588767612, 0.43820399738225596, 0.23852804374098283];
        for (o, e) in out.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn align_prediction_uniform_everything_stays_uniform() {
        let st = AlignmentState::uniform(4, 0.9);
        let out = st.align_prediction(&[0.25; 4], 0);
        for &v in &out {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn align_map_uniform_state_keeps_raw_argmax() {
        let st = AlignmentState::uniform(3, 0.9);
        let map = batch(&[&[0.2, 0.5, 0.3], &[0.6, 0.3, 0.1], &[0.1, 0.2, 0.7]]);
        let out = st.align_map(&map, ConfidenceSource::Raw, &[0.0; 3]);
        assert_eq!(out.pseudo_labels.labels, vec![1, 0, 2]);
        assert!(validate_probability_map(&out.aligned).passed);
        assert!(out.mask.iter().all(|&m| m));
    }

    #[test]
    fn align_map_mask_compares_confidence_to_threshold() {
        let st = AlignmentState::uniform(2, 0.9);
        let map = batch(&[&[0.8, 0.2], &[0.6, 0.4]]);
        // pseudo-labels are class 0 for both pixels; threshold 0.5 on class 0
        let out = st.align_map(&map, ConfidenceSource::Raw, &[0.5, 0.5]);
        assert_eq!(out.confidence, vec![0.8, 0.6]);
        assert_eq!(out.mask, vec![true, true]);
        let out = st.align_map(&map, ConfidenceSource::Raw, &[0.7, 0.7]);
        assert_eq!(out.mask, vec![true, false]); // 0.4 < 0.6 < 0.7 < 0.8
    }

    #[test]
    fn naive_da_examples() {
        // identical distributions: identity
        let st = NaiveDAState::new(&[0.3, 0.7], 0.9);
        let mut st2 = st.clone();
        st2.update_unlabeled(&[0.3, 0.7]);
        for _ in 0..5 {
            st2.update_unlabeled(&[0.3, 0.7]);
        }
        // force unlabeled == labeled exactly
        let st_eq = {
            let mut s = NaiveDAState::new(&[0.3, 0.7], 0.9);
            s.unlabeled = s.labeled.clone();
            s
        };
        let out = st_eq.align_prediction(&[0.25, 0.75]);
        assert!((out[0] - 0.25).abs() < 1e-12);

        // labeled (0.5,0.5), unlabeled (0.8,0.2), F (0.8,0.2) -> (0.5,0.5)
        let mut st = NaiveDAState::new(&[0.5, 0.5], 0.9);
        st.unlabeled = vec![0.8, 0.2];
        let out = st.align_prediction(&[0.8, 0.2]);
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 0.5).abs() < 1e-12);

        // uniform everything stays uniform
        let st = NaiveDAState::new(&[0.5, 0.5], 0.9);
        let out = st.align_prediction(&[0.5, 0.5]);
        assert!((out[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn text_dump_round_trips() {
        let mut st = AlignmentState::uniform(3, 0.99);
        st.labeled.set_row(0, &[0.61234567891234, 0.3, 0.08765432108766]);
        st.unlabeled.set_row(2, &[0.11, 0.22, 0.67]);
        let text = st.to_text();
        let back = AlignmentState::from_text(&text).unwrap();
        assert_eq!(back.alpha, st.alpha);
        for i in 0..3 {
            assert_eq!(back.labeled.row(i), st.labeled.row(i));
            assert_eq!(back.unlabeled.row(i), st.unlabeled.row(i));
        }
    }

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..k).map(|_| -(rng.gen::<f64>().max(1e-16)).ln()).collect();
        let s: f64 = v.iter().sum();
        for x in &mut v {
            *x /= s;
        }
        v
    }

    proptest! {
        #[test]
        fn rows_stay_simplex_under_random_updates(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2..6);
            let mut st = AlignmentState::uniform(k, 0.9);
            for _ in 0..30 {
                let n = rng.gen_range(1..12);
                let vecs: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, k)).collect();
                let refs: Vec<&[f64]> = vecs.iter().map(|v| v.as_slice()).collect();
                let probs = batch(&refs);
                let lab = labels(&(0..n).map(|_| rng.gen_range(0..k) as u8).collect::<Vec<_>>());
                st.update_labeled(&probs, &lab);
                let pseudo = raw_pseudo_labels(&probs);
                st.update_unlabeled(&probs, &pseudo);
                prop_assert!(st.labeled.rows_are_simplex());
                prop_assert!(st.unlabeled.rows_are_simplex());
                for i in 0..k {
                    let tau = st.temperature(i);
                    prop_assert!((0.0..=1.0 - EPS_FLOOR as f64).contains(&tau));
                }
            }
        }

        #[test]
        fn align_output_is_simplex_and_scale_invariant(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2..6);
            let f = random_simplex(&mut rng, k);
            let l = random_simplex(&mut rng, k);
            let u = random_simplex(&mut rng, k);
            let tau = rng.gen::<f64>();
            let out = align_rows(&f, &l, &u, tau);
            let s: f64 = out.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            // positive rescaling of the unlabeled row cancels
            let c = 0.01 + 10.0 * rng.gen::<f64>();
            let u_scaled: Vec<f64> = u.iter().map(|&x| c * x).collect();
            let out2 = align_rows(&f, &l, &u_scaled, tau);
            for (a, b) in out.iter().zip(&out2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn ema_blend_is_a_convex_combination(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2..6);
            let prev = random_simplex(&mut rng, k);
            let mean = random_simplex(&mut rng, k);
            let alpha = rng.gen_range(0.01..0.999);
            let out = ema_blend(&prev, &mean, alpha);
            for ((&o, &p), &m) in out.iter().zip(&prev).zip(&mean) {
                let (lo, hi) = if p <= m { (p, m) } else { (m, p) };
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                prop_assert!((o - (alpha * p + (1.0 - alpha) * m)).abs() < 1e-12);
            }
        }
    }
}
