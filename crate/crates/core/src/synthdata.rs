//! Deterministic generator of 2D multi-class segmentation tasks with
//! controllable long-tail class imbalance and label scarcity.
//!
//! Each image starts as background (class 0) and receives randomly placed
//! shapes for classes 1..K-1, painted in class order so the rarest classes
//! are drawn last and never erased. Pixel intensity is the class mean plus
//! Gaussian noise; the per-pixel feature vector is
//! `[intensity, row/(H-1), col/(W-1), 3x3 mean, 3x3 variance]`.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_feature_map, read_pgm, write_feature_map, write_pgm};
use crate::types::{DatasetSplit, FeatureMap, LabelMap, LabeledSample, UnlabeledSample};

/// Feature vector length produced by [`compute_features`].
pub const FEATURE_DIM: usize = 5;
/// Index of the normalized column coordinate inside the feature vector;
/// horizontal flips rewrite this component.
pub const COL_FEATURE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rect,
    Ring,
}

/// Full description of a synthetic scene family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Target pixel frequency per class (simplex; class 0 is background).
    pub frequencies: Vec<f64>,
    /// Shape drawn for each foreground class 1..K-1.
    pub shapes: Vec<ShapeKind>,
    /// Gaussian noise on intensities.
    pub noise_sigma: f64,
    /// Mean intensity per class.
    pub intensity_means: Vec<f64>,
    /// Fraction of images that keep their labels, in (0, 1].
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// The standard benchmark: 64x64, K=5, long-tail frequencies
    /// proportional to (1, 1/3, 1/9, 1/27, 1/54), overlapping intensity
    /// means, 10% labeled.
    pub fn tail5() -> Self {
        let raw = [1.0, 1.0 / 3.0, 1.0 / 9.0, 1.0 / 27.0, 1.0 / 54.0];
        let total: f64 = raw.iter().sum();
        SceneSpec {
            height: 64,
            width: 64,
            classes: 5,
            frequencies: raw.iter().map(|v| v / total).collect(),
            shapes: vec![ShapeKind::Rect, ShapeKind::Disk, ShapeKind::Ring, ShapeKind::Disk],
            noise_sigma: 0.15,
            intensity_means: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            labeled_fraction: 0.1,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gen_err = |m: String| Err(Error::Generation(m));
        if self.classes < 2 || self.classes > 256 {
            return gen_err(format!("class count {} not in 2..=256", self.classes));
        }
        if self.frequencies.len() != self.classes {
            return gen_err("frequency vector length != classes".into());
        }
        let sum: f64 = self.frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.frequencies.iter().any(|&f| f < 0.0) {
            return gen_err("frequencies must form a simplex".into());
        }
        if self.shapes.len() != self.classes - 1 {
            return gen_err("need one shape per foreground class".into());
        }
        if self.intensity_means.len() != self.classes {
            return gen_err("need one intensity mean per class".into());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return gen_err("labeled fraction must be in (0, 1]".into());
        }
        let fg_needed = self.frequencies[1..].iter().any(|&f| f > 0.0);
        if fg_needed && (self.height < 3 || self.width < 3) {
            return gen_err(format!(
                "shape cannot fit: {}x{} image too small for foreground shapes",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

fn paint_disk(labels: &mut [u8], h: usize, w: usize, class: u8, cr: f64, cc: f64, r: f64) {
    let r2 = r * r;
    for row in 0..h {
        for col in 0..w {
            let (dr, dc) = (row as f64 - cr, col as f64 - cc);
            if dr * dr + dc * dc <= r2 {
                labels[row * w + col] = class;
            }
        }
    }
}

fn paint_ring(labels: &mut [u8], h: usize, w: usize, class: u8, cr: f64, cc: f64, r: f64) {
    let inner = 0.55 * r;
    let (r2, i2) = (r * r, inner * inner);
    for row in 0..h {
        for col in 0..w {
            let (dr, dc) = (row as f64 - cr, col as f64 - cc);
            let d2 = dr * dr + dc * dc;
            if d2 <= r2 && d2 > i2 {
                labels[row * w + col] = class;
            }
        }
    }
}

fn paint_rect(labels: &mut [u8], h: usize, w: usize, class: u8, r0: usize, c0: usize, rh: usize, rw: usize) {
    for row in r0..(r0 + rh).min(h) {
        for col in c0..(c0 + rw).min(w) {
            labels[row * w + col] = class;
        }
    }
}

fn generate_labels(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<LabelMap> {
    let (h, w, k) = (spec.height, spec.width, spec.classes);
    let n = h * w;
    let mut labels = vec![0u8; n];
    for class in 1..k {
        let target = (spec.frequencies[class] * n as f64).round() as usize;
        if target == 0 {
            continue;
        }
        let shape = spec.shapes[class - 1];
        let count = |labels: &[u8]| labels.iter().filter(|&&l| l as usize == class).count();
        let max_attempts = 64 + 8 * target;
        let mut attempts = 0usize;
        while count(&labels) < target {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Generation(format!(
                    "class {class}: reached {} of {target} target pixels after {attempts} shapes",
                    count(&labels)
                )));
            }
            let remaining = (target - count(&labels)) as f64;
            let cr = rng.gen_range(0.0..h as f64);
            let cc = rng.gen_range(0.0..w as f64);
            let scale = rng.gen_range(0.6..1.0);
            match shape {
                ShapeKind::Disk => {
                    let r = (remaining / std::f64::consts::PI).sqrt() * scale;
                    let r = r.clamp(1.0, (h.min(w) as f64) / 3.0);
                    paint_disk(&mut labels, h, w, class as u8, cr, cc, r);
                }
                ShapeKind::Ring => {
                    let r = (remaining / (std::f64::consts::PI * (1.0 - 0.55f64.powi(2)))).sqrt()
                        * scale;
                    let r = r.clamp(2.0, (h.min(w) as f64) / 3.0);
                    paint_ring(&mut labels, h, w, class as u8, cr, cc, r);
                }
                ShapeKind::Rect => {
                    let side = remaining.sqrt();
                    let rh = (side * scale).round().clamp(1.0, h as f64 / 2.0) as usize;
                    let rw = (side * rng.gen_range(0.6..1.0)).round().clamp(1.0, w as f64 / 2.0)
                        as usize;
                    let r0 = rng.gen_range(0..h);
                    let c0 = rng.gen_range(0..w);
                    paint_rect(&mut labels, h, w, class as u8, r0, c0, rh, rw);
                }
            }
        }
    }
    LabelMap::new(h, w, labels)
}

/// Per-pixel features from an intensity grid: intensity, normalized row and
/// column, 3x3 neighborhood mean and (population) variance over in-bounds
/// neighbors.
pub fn compute_features(intensity: &[f64], height: usize, width: usize) -> FeatureMap {
    assert_eq!(intensity.len(), height * width);
    let mut values = vec![0.0; height * width * FEATURE_DIM];
    let row_denom = (height.max(2) - 1) as f64;
    let col_denom = (width.max(2) - 1) as f64;
    for r in 0..height {
        for c in 0..width {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            let mut cnt = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && (nr as usize) < height && (nc as usize) < width {
                        let v = intensity[nr as usize * width + nc as usize];
                        sum += v;
                        sum2 += v * v;
                        cnt += 1.0;
                    }
                }
            }
            let mean = sum / cnt;
            let var = (sum2 / cnt - mean * mean).max(0.0);
            let out = &mut values[(r * width + c) * FEATURE_DIM..(r * width + c + 1) * FEATURE_DIM];
            out[0] = intensity[r * width + c];
            out[1] = r as f64 / row_denom;
            out[COL_FEATURE] = c as f64 / col_denom;
            out[3] = mean;
            out[4] = var;
        }
    }
    FeatureMap { height, width, dim: FEATURE_DIM, values }
}

/// Generates `n_images` scenes and splits them by the labeled fraction.
/// Ground truth of unlabeled images is retained for evaluation only.
pub fn generate(spec: &SceneSpec, n_images: usize) -> Result<DatasetSplit> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::EmptyInput("generate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|_| {
        Error::Generation("bad noise sigma".into())
    })?;
    let mut images = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let labels = generate_labels(spec, &mut rng)?;
        let intensity: Vec<f64> = labels
            .labels
            .iter()
            .map(|&l| spec.intensity_means[l as usize] + noise.sample(&mut rng))
            .collect();
        let features = compute_features(&intensity, spec.height, spec.width);
        images.push((features, labels));
    }
    let n_labeled = ((spec.labeled_fraction * n_images as f64).round() as usize).clamp(1, n_images);
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (i, (features, labels)) in images.into_iter().enumerate() {
        if i < n_labeled {
            labeled.push(LabeledSample { features, labels });
        } else {
            unlabeled.push(UnlabeledSample::new(features, labels));
        }
    }
    Ok(DatasetSplit { classes: spec.classes, feature_dim: FEATURE_DIM, labeled, unlabeled })
}

/// Mirrors an image pair about the vertical axis. Pixel data moves as a pure
/// permutation and the column-coordinate feature is recomputed from the new
/// position, so flipping twice restores the input exactly.
pub fn flip_horizontal(features: &FeatureMap, labels: &LabelMap) -> (FeatureMap, LabelMap) {
    assert_eq!(features.height, labels.height);
    assert_eq!(features.width, labels.width);
    let (h, w, d) = (features.height, features.width, features.dim);
    let col_denom = (w.max(2) - 1) as f64;
    let mut fv = vec![0.0; features.values.len()];
    let mut lv = vec![0u8; labels.labels.len()];
    for r in 0..h {
        for c in 0..w {
            let src = r * w + c;
            let dst = r * w + (w - 1 - c);
            fv[dst * d..(dst + 1) * d].copy_from_slice(features.pixel(src));
            fv[dst * d + COL_FEATURE] = (w - 1 - c) as f64 / col_denom;
            lv[dst] = labels.labels[src];
        }
    }
    (
        FeatureMap { height: h, width: w, dim: d, values: fv },
        LabelMap { height: h, width: w, labels: lv },
    )
}

/// Horizontal flip with probability 1/2, then Gaussian feature noise of
/// scale `sigma_aug`.
pub fn augment(
    features: &FeatureMap,
    labels: &LabelMap,
    sigma_aug: f64,
    rng: &mut ChaCha8Rng,
) -> (FeatureMap, LabelMap) {
    let (mut f, l) = if rng.gen_bool(0.5) {
        flip_horizontal(features, labels)
    } else {
        (features.clone(), labels.clone())
    };
    if sigma_aug > 0.0 {
        let noise = Normal::new(0.0, sigma_aug).unwrap();
        for v in &mut f.values {
            *v += noise.sample(rng);
        }
    }
    (f, l)
}

/// Normalized class-pixel counts over a set of label maps.
pub fn empirical_distribution(maps: &[&LabelMap], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; classes];
    let mut total = 0u64;
    for m in maps {
        m.validate_for(classes)?;
        for p in 0..m.pixels() {
            counts[m.label(p)] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("empirical_distribution"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub features: String,
    pub labels: String,
    pub split: SplitAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitAssignment {
    Labeled,
    Unlabeled,
}

/// Manifest written next to the image files: the generating spec, the file
/// list and the split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SceneSpec,
    pub n_images: usize,
    pub images: Vec<ImageEntry>,
}

/// Writes a split to `dir`: features as CODAPMAP fields, labels (including
/// the hidden truth of unlabeled images) as PGM, plus `manifest.json`.
pub fn save_dataset(dir: &Path, spec: &SceneSpec, split: &DatasetSplit) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut images = Vec::new();
    let mut index = 0usize;
    let mut write_image =
        |features: &FeatureMap, labels: &LabelMap, assign: SplitAssignment, index: usize| -> Result<ImageEntry> {
            let fname = format!("img_{index:04}.fmap");
            let lname = format!("img_{index:04}.pgm");
            let mut fw = BufWriter::new(fs::File::create(dir.join(&fname))?);
            write_feature_map(&mut fw, features)?;
            let mut lw = BufWriter::new(fs::File::create(dir.join(&lname))?);
            write_pgm(&mut lw, labels, split.classes)?;
            Ok(ImageEntry { features: fname, labels: lname, split: assign })
        };
    for s in &split.labeled {
        images.push(write_image(&s.features, &s.labels, SplitAssignment::Labeled, index)?);
        index += 1;
    }
    for s in &split.unlabeled {
        images.push(write_image(
            &s.features,
            s.hidden_truth_for_eval(),
            SplitAssignment::Unlabeled,
            index,
        )?);
        index += 1;
    }
    let manifest = DatasetManifest { spec: spec.clone(), n_images: index, images };
    let mut mw = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut mw, &manifest)?;
    Ok(manifest)
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, DatasetSplit)> {
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(fs::File::open(dir.join("manifest.json"))?))?;
    let classes = manifest.spec.classes;
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut feature_dim = FEATURE_DIM;
    for entry in &manifest.images {
        let features =
            read_feature_map(&mut BufReader::new(fs::File::open(dir.join(&entry.features))?))?;
        let (labels, k) = read_pgm(&mut BufReader::new(fs::File::open(dir.join(&entry.labels))?))?;
        if k != classes {
            return Err(Error::Format {
                format: "dataset",
                reason: format!("label file {} has K={k}, manifest says {classes}", entry.labels),
            });
        }
        feature_dim = features.dim;
        match entry.split {
            SplitAssignment::Labeled => labeled.push(LabeledSample { features, labels }),
            SplitAssignment::Unlabeled => unlabeled.push(UnlabeledSample::new(features, labels)),
        }
    }
    Ok((manifest, DatasetSplit { classes, feature_dim, labeled, unlabeled }))
}
