//! Evaluation metrics: overlap scores from one-vs-rest confusion counts
//! (mIoU, Dice, Jaccard) and surface-distance scores between voxel sets
//! (ASD, Hausdorff, 95th-percentile Hausdorff).
//!
//! Surface distances use exhaustive all-pairs search below
//! [`BRUTE_FORCE_LIMIT`] points and a uniform spatial hash above it; both
//! paths compute the same quantity.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::LabelMap;

/// Per-class one-vs-rest pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub classes: usize,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            tn: vec![0; classes],
        }
    }

    /// Accumulates another image's counts into this one.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.classes, other.classes);
        for k in 0..self.classes {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
            self.tn[k] += other.tn[k];
        }
    }
}

/// One-vs-rest confusion counts per class.
pub fn confusion(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<ConfusionCounts> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::ShapeMismatch {
            left: format!("{}x{}", pred.height, pred.width),
            right: format!("{}x{}", truth.height, truth.width),
            context: "confusion",
        });
    }
    pred.validate_for(classes)?;
    truth.validate_for(classes)?;
    let mut c = ConfusionCounts::zeros(classes);
    let total = pred.pixels() as u64;
    for p in 0..pred.pixels() {
        let (y, t) = (pred.label(p), truth.label(p));
        if y == t {
            c.tp[y] += 1;
        } else {
            c.fp[y] += 1;
            c.fn_[t] += 1;
        }
    }
    for k in 0..classes {
        c.tn[k] = total - c.tp[k] - c.fp[k] - c.fn_[k];
    }
    Ok(c)
}

/// How to score a class absent from both prediction and truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsentClassRule {
    /// Both maps agree the class is absent: perfect agreement, score 1.
    #[default]
    ScoreOne,
    /// Leave the class out of the mean entirely.
    Skip,
}

fn overlap_ratio(c: &ConfusionCounts, class: usize, tp_scale: u64) -> Option<f64> {
    let (tp, fp, fn_) = (c.tp[class], c.fp[class], c.fn_[class]);
    if tp + fp + fn_ == 0 {
        None
    } else {
        Some((tp_scale * tp) as f64 / (tp_scale * tp + fp + fn_) as f64)
    }
}

/// Intersection over union for one class; `None` when the class is absent
/// from both maps.
pub fn iou(c: &ConfusionCounts, class: usize) -> Option<f64> {
    overlap_ratio(c, class, 1)
}

/// Jaccard index (same ratio as IoU, kept under its reported name).
pub fn jaccard(c: &ConfusionCounts, class: usize) -> Option<f64> {
    overlap_ratio(c, class, 1)
}

/// Dice score 2TP/(2TP + FP + FN) for one class.
pub fn dice(c: &ConfusionCounts, class: usize) -> Option<f64> {
    overlap_ratio(c, class, 2)
}

/// Mean over classes of TP/(TP+FP+FN), with absent classes handled by `rule`.
pub fn miou(c: &ConfusionCounts, rule: AbsentClassRule) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..c.classes {
        match (iou(c, k), rule) {
            (Some(v), _) => {
                sum += v;
                n += 1;
            }
            (None, AbsentClassRule::ScoreOne) => {
                sum += 1.0;
                n += 1;
            }
            (None, AbsentClassRule::Skip) => {}
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

// ---------------------------------------------------------------------------
// Surface distances
// ---------------------------------------------------------------------------

/// Switch-over point between all-pairs search and the spatial hash.
pub const BRUTE_FORCE_LIMIT: usize = 500;

/// A set of integer grid coordinates marking foreground surface cells.
/// 2D sets live in the z = 0 plane. Spacing is isotropic.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    pub points: Vec<[i64; 3]>,
    pub spacing: f64,
}

impl VoxelSet {
    pub fn new(mut points: Vec<[i64; 3]>, spacing: f64) -> Self {
        points.sort_unstable();
        points.dedup();
        Self { points, spacing }
    }

    pub fn from_2d(points: impl IntoIterator<Item = (i64, i64)>) -> Self {
        Self::new(points.into_iter().map(|(r, c)| [r, c, 0]).collect(), 1.0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn dist2(a: [i64; 3], b: [i64; 3]) -> f64 {
    let dx = (a[0] - b[0]) as f64;
    let dy = (a[1] - b[1]) as f64;
    let dz = (a[2] - b[2]) as f64;
    dx * dx + dy * dy + dz * dz
}

/// Surface cells of a 2D binary mask: foreground pixels with at least one
/// background or out-of-bounds 4-neighbor.
pub fn extract_surface_2d(mask: &[bool], height: usize, width: usize) -> VoxelSet {
    assert_eq!(mask.len(), height * width);
    let fg = |r: i64, c: i64| -> bool {
        r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width
            && mask[r as usize * width + c as usize]
    };
    let mut pts = Vec::new();
    for r in 0..height as i64 {
        for c in 0..width as i64 {
            if fg(r, c) && !(fg(r - 1, c) && fg(r + 1, c) && fg(r, c - 1) && fg(r, c + 1)) {
                pts.push([r, c, 0]);
            }
        }
    }
    VoxelSet { points: pts, spacing: 1.0 }
}

/// 3D variant with 6-connectivity.
pub fn extract_surface_3d(mask: &[bool], depth: usize, height: usize, width: usize) -> VoxelSet {
    assert_eq!(mask.len(), depth * height * width);
    let fg = |z: i64, r: i64, c: i64| -> bool {
        z >= 0 && r >= 0 && c >= 0
            && (z as usize) < depth && (r as usize) < height && (c as usize) < width
            && mask[(z as usize * height + r as usize) * width + c as usize]
    };
    let mut pts = Vec::new();
    for z in 0..depth as i64 {
        for r in 0..height as i64 {
            for c in 0..width as i64 {
                if fg(z, r, c)
                    && !(fg(z - 1, r, c) && fg(z + 1, r, c) && fg(z, r - 1, c)
                        && fg(z, r + 1, c) && fg(z, r, c - 1) && fg(z, r, c + 1))
                {
                    pts.push([z, r, c]);
                }
            }
        }
    }
    VoxelSet { points: pts, spacing: 1.0 }
}

/// Nearest-neighbor distance from every point of `from` to the set `to`,
/// exhaustive all-pairs scan.
fn directed_distances_brute(from: &[[i64; 3]], to: &[[i64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|&a| {
            to.iter()
                .map(|&b| dist2(a, b))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Uniform spatial hash over cubic cells; query expands ring by ring until
/// the best candidate provably beats every unexplored cell.
struct SpatialHash {
    cells: HashMap<[i64; 3], Vec<[i64; 3]>>,
    cell_size: f64,
}

impl SpatialHash {
    fn build(points: &[[i64; 3]], cell_size: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<[i64; 3]>> = HashMap::new();
        for &p in points {
            let key = [
                (p[0] as f64 / cell_size).floor() as i64,
                (p[1] as f64 / cell_size).floor() as i64,
                (p[2] as f64 / cell_size).floor() as i64,
            ];
            cells.entry(key).or_default().push(p);
        }
        Self { cells, cell_size }
    }

    fn nearest_dist(&self, q: [i64; 3]) -> f64 {
        let key = [
            (q[0] as f64 / self.cell_size).floor() as i64,
            (q[1] as f64 / self.cell_size).floor() as i64,
            (q[2] as f64 / self.cell_size).floor() as i64,
        ];
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        loop {
            let mut any_cell = false;
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dz.abs().max(dy.abs()).max(dx.abs()) != ring {
                            continue;
                        }
                        if let Some(pts) = self.cells.get(&[key[0] + dz, key[1] + dy, key[2] + dx])
                        {
                            any_cell = true;
                            for &p in pts {
                                best = best.min(dist2(q, p));
                            }
                        }
                    }
                }
            }
            // Once a candidate exists, every point in rings beyond
            // (ring formula) is at least (ring)*cell_size away.
            if best.is_finite() {
                let guaranteed = ring as f64 * self.cell_size;
                if guaranteed * guaranteed >= best {
                    return best.sqrt();
                }
            }
            let _ = any_cell;
            ring += 1;
        }
    }
}

fn directed_distances(from: &[[i64; 3]], to: &[[i64; 3]]) -> Vec<f64> {
    if from.len().max(to.len()) < BRUTE_FORCE_LIMIT {
        return directed_distances_brute(from, to);
    }
    // Cell size near the average spacing keeps occupancy O(1).
    let hash = SpatialHash::build(to, 4.0);
    from.iter().map(|&a| hash.nearest_dist(a)).collect()
}

fn require_nonempty(a: &VoxelSet, b: &VoxelSet, what: &'static str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(Error::UndefinedMetric(what))
    } else {
        Ok(())
    }
}

/// Average symmetric surface distance in grid units times spacing.
pub fn asd(a: &VoxelSet, b: &VoxelSet) -> Result<f64> {
    require_nonempty(a, b, "asd of an empty surface")?;
    let ab = directed_distances(&a.points, &b.points);
    let ba = directed_distances(&b.points, &a.points);
    let total: f64 = ab.iter().chain(ba.iter()).sum();
    Ok(a.spacing * total / (a.len() + b.len()) as f64)
}

/// Hausdorff distance: max of the two directed maxima.
pub fn hd(a: &VoxelSet, b: &VoxelSet) -> Result<f64> {
    require_nonempty(a, b, "hd of an empty surface")?;
    let ab = directed_distances(&a.points, &b.points);
    let ba = directed_distances(&b.points, &a.points);
    let m = ab.iter().chain(ba.iter()).fold(0.0f64, |acc, &d| acc.max(d));
    Ok(a.spacing * m)
}

/// 95th-percentile Hausdorff distance: nearest-rank percentile of the pooled
/// directed nearest-neighbor distances from both sides.
pub fn hd95(a: &VoxelSet, b: &VoxelSet) -> Result<f64> {
    require_nonempty(a, b, "hd95 of an empty surface")?;
    let mut pooled = directed_distances(&a.points, &b.points);
    pooled.extend(directed_distances(&b.points, &a.points));
    Ok(a.spacing * percentile_nearest_rank(&mut pooled, 0.95))
}

/// Nearest-rank percentile: value at rank ceil(q*n) of the sorted list.
pub fn percentile_nearest_rank(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Per-class overlap scores.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerClassScores {
    pub dice: Vec<f64>,
    pub jaccard: Vec<f64>,
    pub iou: Vec<f64>,
}

/// The metric report emitted by evaluation. Surface distances are means over
/// (image, foreground class) pairs where both surfaces exist, `null` when no
/// such pair exists.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub per_class: PerClassScores,
    pub miou: f64,
    pub asd: Option<f64>,
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
}

impl MetricReport {
    /// Overlap scores from pooled confusion counts; absent classes score 1.
    pub fn from_confusion(c: &ConfusionCounts) -> Self {
        let rule = AbsentClassRule::ScoreOne;
        let fill = |f: fn(&ConfusionCounts, usize) -> Option<f64>| -> Vec<f64> {
            (0..c.classes).map(|k| f(c, k).unwrap_or(1.0)).collect()
        };
        MetricReport {
            per_class: PerClassScores {
                dice: fill(dice),
                jaccard: fill(jaccard),
                iou: fill(iou),
            },
            miou: miou(c, rule),
            asd: None,
            hd: None,
            hd95: None,
        }
    }
}

/// Surface distances between prediction and truth, averaged over foreground
/// classes present (surface nonempty) on both sides.
pub fn surface_scores(
    pred: &LabelMap,
    truth: &LabelMap,
    classes: usize,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let mut asds = Vec::new();
    let mut hds = Vec::new();
    let mut hd95s = Vec::new();
    for k in 1..classes {
        let mask_of = |m: &LabelMap| -> Vec<bool> {
            m.labels.iter().map(|&l| l as usize == k).collect()
        };
        let sp = extract_surface_2d(&mask_of(pred), pred.height, pred.width);
        let st = extract_surface_2d(&mask_of(truth), truth.height, truth.width);
        if sp.is_empty() || st.is_empty() {
            continue;
        }
        asds.push(asd(&sp, &st).expect("nonempty surfaces"));
        hds.push(hd(&sp, &st).expect("nonempty surfaces"));
        hd95s.push(hd95(&sp, &st).expect("nonempty surfaces"));
    }
    let mean = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    (mean(&asds), mean(&hds), mean(&hd95s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, v).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let t = lm(2, 2, vec![0, 1, 1, 0]);
        let c = confusion(&t, &t, 2).unwrap();
        assert_eq!(c.fp, vec![0, 0]);
        assert_eq!(c.fn_, vec![0, 0]);
        assert_eq!(miou(&c, AbsentClassRule::ScoreOne), 1.0);
        assert_eq!(dice(&c, 0), Some(1.0));
        assert_eq!(jaccard(&c, 1), Some(1.0));
    }

    #[test]
    fn disjoint_single_class_maps_have_zero_tp() {
        let p = lm(1, 4, vec![0, 0, 0, 0]);
        let t = lm(1, 4, vec![1, 1, 1, 1]);
        let c = confusion(&p, &t, 2).unwrap();
        assert_eq!(c.tp, vec![0, 0]);
        assert_eq!(iou(&c, 0), Some(0.0));
        assert_eq!(iou(&c, 1), Some(0.0));
        assert_eq!(miou(&c, AbsentClassRule::ScoreOne), 0.0);
    }

    #[test]
    fn dice_and_jaccard_formula_arithmetic() {
        let mut c = ConfusionCounts::zeros(1);
        c.tp[0] = 6;
        c.fp[0] = 2;
        c.fn_[0] = 2;
        assert_eq!(dice(&c, 0), Some(0.75));
        assert_eq!(jaccard(&c, 0), Some(0.6));
    }

    #[test]
    fn constant_predictor_on_balanced_two_class_map() {
        // half class 0, half class 1, prediction all class 0:
        // class 0 IoU = 0.5, class 1 IoU = 0 -> mIoU 0.25
        let p = lm(1, 8, vec![0; 8]);
        let t = lm(1, 8, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let c = confusion(&p, &t, 2).unwrap();
        assert_eq!(iou(&c, 0), Some(0.5));
        assert_eq!(iou(&c, 1), Some(0.0));
        assert_eq!(miou(&c, AbsentClassRule::ScoreOne), 0.25);
    }

    #[test]
    fn confusion_matches_per_pixel_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = rng.gen_range(2..5);
            let p = lm(8, 8, (0..64).map(|_| rng.gen_range(0..k) as u8).collect());
            let t = lm(8, 8, (0..64).map(|_| rng.gen_range(0..k) as u8).collect());
            let c = confusion(&p, &t, k).unwrap();
            for class in 0..k {
                let mut tp = 0;
                let mut fp = 0;
                let mut fn_ = 0;
                let mut tn = 0;
                for i in 0..64 {
                    let py = p.label(i) == class;
                    let ty = t.label(i) == class;
                    match (py, ty) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
                assert_eq!((c.tp[class], c.fp[class], c.fn_[class], c.tn[class]), (tp, fp, fn_, tn));
            }
        }
    }

    #[test]
    fn confusion_rejects_shape_mismatch() {
        let p = lm(1, 2, vec![0, 0]);
        let t = lm(2, 1, vec![0, 0]);
        assert!(confusion(&p, &t, 2).is_err());
    }

    #[test]
    fn absent_class_convention() {
        // class 2 appears nowhere
        let p = lm(1, 2, vec![0, 1]);
        let t = lm(1, 2, vec![0, 1]);
        let c = confusion(&p, &t, 3).unwrap();
        assert_eq!(iou(&c, 2), None);
        assert_eq!(miou(&c, AbsentClassRule::ScoreOne), 1.0);
        assert_eq!(miou(&c, AbsentClassRule::Skip), 1.0);
        // with an error present, the rules diverge
        let p2 = lm(1, 2, vec![0, 0]);
        let c2 = confusion(&p2, &t, 3).unwrap();
        let s1 = miou(&c2, AbsentClassRule::ScoreOne); // (0.5 + 0 + 1)/3
        let s2 = miou(&c2, AbsentClassRule::Skip); // (0.5 + 0)/2
        assert!((s1 - 0.5).abs() < 1e-12);
        assert!((s2 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn single_voxel_is_its_own_surface() {
        let mask = vec![false, true, false, false];
        let s = extract_surface_2d(&mask, 2, 2);
        assert_eq!(s.points, vec![[0, 1, 0]]);
    }

    #[test]
    fn filled_square_surface_is_the_border() {
        let mut mask = vec![false; 25];
        for r in 1..4 {
            for c in 1..4 {
                mask[r * 5 + c] = true;
            }
        }
        let s = extract_surface_2d(&mask, 5, 5);
        assert_eq!(s.len(), 8); // 3x3 block minus interior center
        assert!(!s.points.contains(&[2, 2, 0]));
    }

    #[test]
    fn surface_matches_neighbor_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
            let mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.5)).collect();
            let got = extract_surface_2d(&mask, h, w);
            let mut want = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if !mask[r * w + c] {
                        continue;
                    }
                    let neighbors = [
                        (r as i64 - 1, c as i64),
                        (r as i64 + 1, c as i64),
                        (r as i64, c as i64 - 1),
                        (r as i64, c as i64 + 1),
                    ];
                    let exposed = neighbors.iter().any(|&(nr, nc)| {
                        nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64
                            || !mask[nr as usize * w + nc as usize]
                    });
                    if exposed {
                        want.push([r as i64, c as i64, 0]);
                    }
                }
            }
            assert_eq!(got.points, want);
        }
    }

    #[test]
    fn asd_identity_and_single_pair() {
        let a = VoxelSet::from_2d([(0, 0), (1, 1)]);
        assert_eq!(asd(&a, &a).unwrap(), 0.0);
        let p = VoxelSet::from_2d([(0, 0)]);
        let q = VoxelSet::from_2d([(3, 4)]);
        assert_eq!(asd(&p, &q).unwrap(), 5.0);
        assert_eq!(hd(&p, &q).unwrap(), 5.0);
        assert_eq!(hd95(&p, &q).unwrap(), 5.0);
    }

    #[test]
    fn empty_surface_is_an_error() {
        let a = VoxelSet::from_2d([(0, 0)]);
        let e = VoxelSet::from_2d([]);
        assert!(asd(&a, &e).is_err());
        assert!(hd(&e, &a).is_err());
        assert!(hd95(&e, &e).is_err());
    }

    #[test]
    fn hashed_path_matches_brute_force_above_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<[i64; 3]> {
            (0..n)
                .map(|_| [rng.gen_range(-60..60), rng.gen_range(-60..60), rng.gen_range(-3..3)])
                .collect()
        };
        let a = VoxelSet::new(pts(&mut rng, 700), 1.0);
        let b = VoxelSet::new(pts(&mut rng, 650), 1.0);
        assert!(a.len() >= BRUTE_FORCE_LIMIT || b.len() >= BRUTE_FORCE_LIMIT);
        let got = directed_distances(&a.points, &b.points);
        let want = directed_distances_brute(&a.points, &b.points);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    proptest! {
        #[test]
        fn surface_distances_are_symmetric(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..30);
            let m = rng.gen_range(1..30);
            let mk = |rng: &mut ChaCha8Rng, n: usize| {
                VoxelSet::new(
                    (0..n).map(|_| [rng.gen_range(-20..20), rng.gen_range(-20..20), 0]).collect(),
                    1.0,
                )
            };
            let a = mk(&mut rng, n);
            let b = mk(&mut rng, m);
            prop_assert!((asd(&a, &b).unwrap() - asd(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((hd(&a, &b).unwrap() - hd(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(hd95(&a, &b).unwrap() <= hd(&a, &b).unwrap() + 1e-12);
            // zero distances iff equal sets
            let zero = asd(&a, &b).unwrap() == 0.0 && hd(&a, &b).unwrap() == 0.0;
            prop_assert_eq!(zero, a.points == b.points);
        }

        #[test]
        fn dice_jaccard_identity(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            prop_assume!(tp + fp + fn_ > 0);
            let mut c = ConfusionCounts::zeros(1);
            c.tp[0] = tp;
            c.fp[0] = fp;
            c.fn_[0] = fn_;
            let d = dice(&c, 0).unwrap();
            let j = jaccard(&c, 0).unwrap();
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        }

        #[test]
        fn miou_invariant_under_joint_relabeling(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2..5usize);
            let n = 24;
            let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
            let t: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
            // random permutation of class ids
            let mut perm: Vec<u8> = (0..k as u8).collect();
            for i in (1..k).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let apply = |v: &[u8]| -> Vec<u8> { v.iter().map(|&x| perm[x as usize]).collect() };
            let c1 = confusion(&lm(1, n, p.clone()), &lm(1, n, t.clone()), k).unwrap();
            let c2 = confusion(&lm(1, n, apply(&p)), &lm(1, n, apply(&t)), k).unwrap();
            let m1 = miou(&c1, AbsentClassRule::ScoreOne);
            let m2 = miou(&c2, AbsentClassRule::ScoreOne);
            prop_assert!((m1 - m2).abs() < 1e-12);
        }
    }
}
