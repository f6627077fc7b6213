//! The co-training engine: two segmenters, two alignment states, the
//! supervised loss, the over-expectation cross-supervision loss,
//! distribution updates and logging.
//!
//! Each iteration follows a fixed line order: update the labeled rows, then
//! the unlabeled rows (from raw pseudo-labels), then derive aligned
//! pseudo-labels, then the supervised loss, then the unsupervised loss, then
//! one optimizer step per model. Ablation modes strip the machinery down to
//! plain cross-pseudo supervision, a single-distribution baseline, the
//! over-expectation filter alone, or alignment alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentState, ConfidenceSource, NaiveDAState};
use crate::error::{Error, Result};
use crate::metrics::{confusion, surface_scores, AbsentClassRule, ConfusionCounts, MetricReport};
use crate::segmenter::{
    polynomial_lr, weighted_ce_loss_and_deltas, ActivationCache, GradientBundle, NetDims,
    SegmenterState,
};
use crate::synthdata::empirical_distribution;
use crate::types::{
    argmax, argmax_labels, one_hot, DatasetSplit, FeatureMap, LabelMap, ProbabilityMap,
};

/// Images used for periodic validation (the full set is evaluated once at
/// the end; validation only steers best-checkpoint retention).
pub const VALIDATION_IMAGES_CAP: usize = 12;

/// Which pieces of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Labeled loss only; unlabeled data unused.
    SupervisedOnly,
    /// Plain cross-pseudo supervision: raw pseudo-labels, no filtering.
    Cotrain,
    /// Cross-pseudo supervision through the single-distribution baseline.
    CotrainNaiveDa,
    /// Raw pseudo-labels gated by the over-expectation threshold.
    CotrainOe,
    /// Class-wise alignment without the over-expectation filter.
    CotrainCoDa,
    /// Class-wise alignment plus the over-expectation filter.
    FullCoDa,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::SupervisedOnly => "supervised_only",
            TrainMode::Cotrain => "cotrain",
            TrainMode::CotrainNaiveDa => "cotrain+naive_da",
            TrainMode::CotrainOe => "cotrain+oe",
            TrainMode::CotrainCoDa => "cotrain+coda",
            TrainMode::FullCoDa => "full_coda",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "supervised_only" => TrainMode::SupervisedOnly,
            "cotrain" => TrainMode::Cotrain,
            "cotrain+naive_da" => TrainMode::CotrainNaiveDa,
            "cotrain+oe" => TrainMode::CotrainOe,
            "cotrain+coda" => TrainMode::CotrainCoDa,
            "full_coda" => TrainMode::FullCoDa,
            _ => return None,
        })
    }

    /// True when the mode maintains the K×K matrix pair.
    pub fn uses_matrices(&self) -> bool {
        matches!(self, TrainMode::CotrainOe | TrainMode::CotrainCoDa | TrainMode::FullCoDa)
    }

    /// True when predictions pass through the class-wise alignment transform.
    pub fn aligns(&self) -> bool {
        matches!(self, TrainMode::CotrainCoDa | TrainMode::FullCoDa)
    }

    /// True when the over-expectation mask filters pixels.
    pub fn filters(&self) -> bool {
        matches!(self, TrainMode::CotrainOe | TrainMode::FullCoDa)
    }
}

/// Over-expectation threshold selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// Per-class `t(i) = M^u_ii`.
    Dynamic,
    /// One fixed value for every class.
    Static(f64),
}

impl ThresholdMode {
    pub fn as_string(&self) -> String {
        match self {
            ThresholdMode::Dynamic => "dynamic".into(),
            ThresholdMode::Static(v) => format!("{v}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "dynamic" {
            return Some(ThresholdMode::Dynamic);
        }
        let v: f64 = s.parse().ok()?;
        (0.0..=1.0).contains(&v).then_some(ThresholdMode::Static(v))
    }
}

/// All run hyperparameters; the single source of experiment truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed_model1: u64,
    pub seed_model2: u64,
    pub seed_data: u64,
    /// EMA momentum for distribution rows.
    pub alpha: f64,
    pub lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub max_iters: u64,
    pub mode: TrainMode,
    pub threshold: ThresholdMode,
    pub confidence_source: ConfidenceSource,
    /// Weight on the unsupervised loss.
    pub lambda_u: f64,
    /// Supervise with the teacher's aligned vector instead of its one-hot
    /// pseudo-label.
    pub soft_targets: bool,
    pub hidden_width: usize,
    pub eval_every: u64,
    /// Ablation switch: skip all matrix updates (rows stay at init).
    pub freeze_alignment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed_model1: 1,
            seed_model2: 2,
            seed_data: 3,
            alpha: 0.99,
            lr: 0.05,
            lr_power: 0.9,
            momentum: 0.9,
            batch_labeled: 1024,
            batch_unlabeled: 1024,
            max_iters: 5000,
            mode: TrainMode::FullCoDa,
            threshold: ThresholdMode::Dynamic,
            confidence_source: ConfidenceSource::Raw,
            lambda_u: 1.0,
            soft_targets: false,
            hidden_width: 32,
            eval_every: 200,
            freeze_alignment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config { key: key.into(), reason: reason.into() })
        };
        if self.max_iters == 0 {
            return bad("max_iters", "must be positive");
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch_labeled/batch_unlabeled", "must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", "must lie in (0, 1)");
        }
        if let ThresholdMode::Static(v) = self.threshold {
            if !(0.0..=1.0).contains(&v) {
                return bad("threshold", "static value must lie in [0, 1]");
            }
        }
        if self.lambda_u < 0.0 {
            return bad("lambda_u", "must be nonnegative");
        }
        if self.hidden_width == 0 {
            return bad("hidden_width", "must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be positive");
        }
        if self.seed_model1 == self.seed_model2 {
            return bad("seed_model2", "the two model seeds must differ");
        }
        Ok(())
    }

    /// Key/value pairs in a fixed order; the flat text config is these
    /// joined as `key = value` lines.
    pub fn flat_pairs(&self) -> Vec<(&'static str, String)> {
        let c = |s: ConfidenceSource| match s {
            ConfidenceSource::Raw => "raw",
            ConfidenceSource::Aligned => "aligned",
        };
        vec![
            ("seed_model1", self.seed_model1.to_string()),
            ("seed_model2", self.seed_model2.to_string()),
            ("seed_data", self.seed_data.to_string()),
            ("alpha", format!("{}", self.alpha)),
            ("lr", format!("{}", self.lr)),
            ("lr_power", format!("{}", self.lr_power)),
            ("momentum", format!("{}", self.momentum)),
            ("batch_labeled", self.batch_labeled.to_string()),
            ("batch_unlabeled", self.batch_unlabeled.to_string()),
            ("max_iters", self.max_iters.to_string()),
            ("mode", self.mode.as_str().into()),
            ("threshold", self.threshold.as_string()),
            ("confidence_source", c(self.confidence_source).into()),
            ("lambda_u", format!("{}", self.lambda_u)),
            ("soft_targets", self.soft_targets.to_string()),
            ("hidden_width", self.hidden_width.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("freeze_alignment", self.freeze_alignment.to_string()),
        ]
    }

    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flat_pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Parses the flat `key = value` format, starting from defaults.
    /// Unknown keys and unparseable values are all reported together.
    pub fn from_flat(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut offending: Vec<String> = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                offending.push(format!("{line:?} (not key = value)"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let ok = match key {
                "seed_model1" => value.parse().map(|v| cfg.seed_model1 = v).is_ok(),
                "seed_model2" => value.parse().map(|v| cfg.seed_model2 = v).is_ok(),
                "seed_data" => value.parse().map(|v| cfg.seed_data = v).is_ok(),
                "alpha" => value.parse().map(|v| cfg.alpha = v).is_ok(),
                "lr" => value.parse().map(|v| cfg.lr = v).is_ok(),
                "lr_power" => value.parse().map(|v| cfg.lr_power = v).is_ok(),
                "momentum" => value.parse().map(|v| cfg.momentum = v).is_ok(),
                "batch_labeled" => value.parse().map(|v| cfg.batch_labeled = v).is_ok(),
                "batch_unlabeled" => value.parse().map(|v| cfg.batch_unlabeled = v).is_ok(),
                "max_iters" => value.parse().map(|v| cfg.max_iters = v).is_ok(),
                "mode" => TrainMode::parse(value).map(|v| cfg.mode = v).is_some(),
                "threshold" => ThresholdMode::parse(value).map(|v| cfg.threshold = v).is_some(),
                "confidence_source" => match value {
                    "raw" => {
                        cfg.confidence_source = ConfidenceSource::Raw;
                        true
                    }
                    "aligned" => {
                        cfg.confidence_source = ConfidenceSource::Aligned;
                        true
                    }
                    _ => false,
                },
                "lambda_u" => value.parse().map(|v| cfg.lambda_u = v).is_ok(),
                "soft_targets" => value.parse().map(|v| cfg.soft_targets = v).is_ok(),
                "hidden_width" => value.parse().map(|v| cfg.hidden_width = v).is_ok(),
                "eval_every" => value.parse().map(|v| cfg.eval_every = v).is_ok(),
                "freeze_alignment" => value.parse().map(|v| cfg.freeze_alignment = v).is_ok(),
                _ => {
                    offending.push(format!("{key} (unknown key)"));
                    continue;
                }
            };
            if !ok {
                offending.push(format!("{key} (bad value {value:?})"));
            }
        }
        if !offending.is_empty() {
            return Err(Error::Config {
                key: offending.join(", "),
                reason: "could not parse".into(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config echo for JSON summaries.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.flat_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// One training iteration's log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: u64,
    pub l_s: f64,
    pub l_u: Option<f64>,
    pub mask_frac: [Option<f64>; 2],
    pub miou: [Option<f64>; 2],
    pub diag_labeled: [Vec<f64>; 2],
    pub diag_unlabeled: [Vec<f64>; 2],
}

/// CSV header matching [`IterationRecord::csv_row`].
pub fn csv_header(classes: usize) -> String {
    let mut cols = vec![
        "iter".to_string(),
        "L_s".into(),
        "L_u".into(),
        "mask_frac_1".into(),
        "mask_frac_2".into(),
        "mIoU_1".into(),
        "mIoU_2".into(),
    ];
    for model in 1..=2 {
        for (tag, _) in [("Ml", 0), ("Mu", 1)] {
            for k in 0..classes {
                cols.push(format!("diag_{tag}_{model}_{k}"));
            }
        }
    }
    cols.join(",")
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl IterationRecord {
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.iter.to_string(),
            format!("{}", self.l_s),
            opt_cell(self.l_u),
            opt_cell(self.mask_frac[0]),
            opt_cell(self.mask_frac[1]),
            opt_cell(self.miou[0]),
            opt_cell(self.miou[1]),
        ];
        for m in 0..2 {
            for diag in [&self.diag_labeled[m], &self.diag_unlabeled[m]] {
                cols.extend(diag.iter().map(|v| format!("{v}")));
            }
        }
        cols.join(",")
    }
}

/// Best validation checkpoint seen so far.
#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    /// 0-based model index.
    pub model: usize,
    pub iter: u64,
    pub miou: f64,
    pub state: SegmenterState,
}

/// Everything a finished run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub models: [SegmenterState; 2],
    pub aligners: [AlignmentState; 2],
    pub records: Vec<IterationRecord>,
    pub best: Option<BestCheckpoint>,
}

struct Forward {
    probs: ProbabilityMap,
    cache: ActivationCache,
}

/// Loss terms of one unsupervised pass.
pub struct UnsupOutcome {
    pub loss: f64,
    pub grads: [GradientBundle; 2],
    /// Fraction of unlabeled pixels passing each model's teacher-side mask.
    pub mask_frac: [f64; 2],
}

pub struct Engine {
    pub config: TrainConfig,
    pub data: DatasetSplit,
    pub models: [SegmenterState; 2],
    pub aligners: [AlignmentState; 2],
    pub naive: [NaiveDAState; 2],
    rng: ChaCha8Rng,
    records: Vec<IterationRecord>,
    best: Option<BestCheckpoint>,
}

fn mean_prediction(probs: &ProbabilityMap) -> Vec<f64> {
    let k = probs.classes;
    let mut mean = vec![0.0; k];
    for p in 0..probs.pixels() {
        for (m, &v) in mean.iter_mut().zip(probs.pixel(p)) {
            *m += v;
        }
    }
    let n = probs.pixels().max(1) as f64;
    for m in &mut mean {
        *m /= n;
    }
    mean
}

impl Engine {
    pub fn new(config: TrainConfig, data: DatasetSplit) -> Result<Self> {
        config.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::EmptyInput("labeled split"));
        }
        if config.mode != TrainMode::SupervisedOnly && data.unlabeled.is_empty() {
            return Err(Error::Config {
                key: "mode".into(),
                reason: format!("{} needs unlabeled data", config.mode.as_str()),
            });
        }
        let dims = NetDims {
            inputs: data.feature_dim,
            hidden: config.hidden_width,
            classes: data.classes,
        };
        let models = [
            SegmenterState::init(config.seed_model1, dims),
            SegmenterState::init(config.seed_model2, dims),
        ];
        let aligners = [
            AlignmentState::uniform(data.classes, config.alpha),
            AlignmentState::uniform(data.classes, config.alpha),
        ];
        let labeled_maps: Vec<&LabelMap> = data.labeled.iter().map(|s| &s.labels).collect();
        let labeled_dist = empirical_distribution(&labeled_maps, data.classes)?;
        let naive = [
            NaiveDAState::new(&labeled_dist, config.alpha),
            NaiveDAState::new(&labeled_dist, config.alpha),
        ];
        let rng = ChaCha8Rng::seed_from_u64(config.seed_data);
        Ok(Engine { config, data, models, aligners, naive, rng, records: Vec::new(), best: None })
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn best(&self) -> Option<&BestCheckpoint> {
        self.best.as_ref()
    }

    fn sample_labeled(&mut self, n: usize) -> (FeatureMap, LabelMap) {
        let images = &self.data.labeled;
        let sizes: Vec<usize> = images.iter().map(|s| s.features.pixels()).collect();
        let total: usize = sizes.iter().sum();
        let d = self.data.feature_dim;
        let mut fv = Vec::with_capacity(n * d);
        let mut lv = Vec::with_capacity(n);
        for _ in 0..n {
            let mut idx = self.rng.gen_range(0..total);
            let mut img = 0;
            while idx >= sizes[img] {
                idx -= sizes[img];
                img += 1;
            }
            fv.extend_from_slice(images[img].features.pixel(idx));
            lv.push(images[img].labels.labels[idx]);
        }
        (
            FeatureMap { height: 1, width: n, dim: d, values: fv },
            LabelMap { height: 1, width: n, labels: lv },
        )
    }

    fn sample_unlabeled(&mut self, n: usize) -> FeatureMap {
        let images = &self.data.unlabeled;
        let sizes: Vec<usize> = images.iter().map(|s| s.features.pixels()).collect();
        let total: usize = sizes.iter().sum();
        let d = self.data.feature_dim;
        let mut fv = Vec::with_capacity(n * d);
        for _ in 0..n {
            let mut idx = self.rng.gen_range(0..total);
            let mut img = 0;
            while idx >= sizes[img] {
                idx -= sizes[img];
                img += 1;
            }
            fv.extend_from_slice(images[img].features.pixel(idx));
        }
        FeatureMap { height: 1, width: n, dim: d, values: fv }
    }

    fn forward_pair(&self, features: &FeatureMap) -> Result<[Forward; 2]> {
        let mk = |m: &SegmenterState| -> Result<Forward> {
            let (probs, cache) = m.forward_cached(features)?;
            Ok(Forward { probs, cache })
        };
        Ok([mk(&self.models[0])?, mk(&self.models[1])?])
    }

    /// Per-class thresholds for one teacher model under the configured mode.
    fn thresholds_for(&self, teacher: usize) -> Vec<f64> {
        let k = self.data.classes;
        if !self.config.mode.filters() {
            // no filtering: every confidence passes
            return vec![f64::NEG_INFINITY; k];
        }
        match self.config.threshold {
            ThresholdMode::Dynamic => self.aligners[teacher].dynamic_thresholds(),
            ThresholdMode::Static(v) => vec![v; k],
        }
    }

    /// The cross-supervision loss on one unlabeled batch, both directions.
    ///
    /// For each direction the teacher's aligned map yields pseudo-labels,
    /// confidences and the over-expectation mask; the student's (aligned)
    /// output is supervised at mask-passing pixels, averaged over their
    /// count (floored at 1). Teacher targets are detached: gradients flow
    /// only into the student.
    pub fn oe_cross_loss(&self, unlabeled: &FeatureMap) -> Result<UnsupOutcome> {
        let fw = self.forward_pair(unlabeled)?;
        self.unsup_from_forwards(unlabeled, &fw)
    }

    fn unsup_from_forwards(&self, unlabeled: &FeatureMap, fw: &[Forward; 2]) -> Result<UnsupOutcome> {
        debug_assert!(self.config.mode != TrainMode::SupervisedOnly);
        let k = self.data.classes;
        let n = unlabeled.pixels();
        let mode = self.config.mode;

        // Per model: its (possibly aligned) output, its pseudo-labels as a
        // teacher, and its teacher-side mask.
        struct Side {
            output: ProbabilityMap,
            pseudo: LabelMap,
            weights: Vec<f64>,
            mask_frac: f64,
        }
        let mut sides = Vec::with_capacity(2);
        for m in 0..2 {
            let raw = &fw[m].probs;
            let side = if mode.aligns() {
                let out = self.aligners[m].align_map(
                    raw,
                    self.config.confidence_source,
                    &self.thresholds_for(m),
                );
                let frac = out.mask_fraction();
                Side {
                    output: out.aligned,
                    pseudo: out.pseudo_labels,
                    weights: out.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                    mask_frac: frac,
                }
            } else if mode == TrainMode::CotrainNaiveDa {
                let aligned = self.naive[m].align_map(raw);
                let pseudo = argmax_labels(&aligned);
                Side { output: aligned, pseudo, weights: vec![1.0; n], mask_frac: 1.0 }
            } else {
                // plain co-training or over-expectation filtering on raw maps
                let pseudo = argmax_labels(raw);
                let thresholds = self.thresholds_for(m);
                let mut weights = vec![1.0; n];
                let mut passing = n;
                if mode.filters() {
                    passing = 0;
                    for p in 0..n {
                        let conf = raw.pixel(p)[pseudo.label(p)];
                        if conf > thresholds[pseudo.label(p)] {
                            passing += 1;
                        } else {
                            weights[p] = 0.0;
                        }
                    }
                }
                Side {
                    output: raw.clone(),
                    pseudo,
                    weights,
                    mask_frac: passing as f64 / n.max(1) as f64,
                }
            };
            sides.push(side);
        }

        let mut loss = 0.0;
        let mut grads: Vec<GradientBundle> = Vec::with_capacity(2);
        for student in 0..2 {
            let teacher = 1 - student;
            let targets = if self.config.soft_targets && mode.aligns() {
                sides[teacher].output.clone()
            } else {
                one_hot(&sides[teacher].pseudo, k)?
            };
            let (l, deltas) = weighted_ce_loss_and_deltas(
                &sides[student].output,
                &targets,
                &sides[teacher].weights,
            );
            loss += l;
            grads.push(self.models[student].backward_logits(
                unlabeled,
                &fw[student].cache,
                &deltas,
            ));
        }
        let [g0, g1] = <[GradientBundle; 2]>::try_from(grads).expect("two gradients");
        Ok(UnsupOutcome {
            loss,
            grads: [g0, g1],
            mask_frac: [sides[0].mask_frac, sides[1].mask_frac],
        })
    }

    fn supervised_from_forwards(
        &self,
        labeled: &FeatureMap,
        labels: &LabelMap,
        fw: &[Forward; 2],
    ) -> Result<(f64, [GradientBundle; 2])> {
        let targets = one_hot(labels, self.data.classes)?;
        let weights = vec![1.0; labeled.pixels()];
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        for m in 0..2 {
            let (l, deltas) = weighted_ce_loss_and_deltas(&fw[m].probs, &targets, &weights);
            loss += l;
            grads.push(self.models[m].backward_logits(labeled, &fw[m].cache, &deltas));
        }
        let [g0, g1] = <[GradientBundle; 2]>::try_from(grads).expect("two gradients");
        Ok((loss, [g0, g1]))
    }

    fn validation_miou(&self, model: usize) -> Option<f64> {
        if self.data.unlabeled.is_empty() {
            return None;
        }
        let eval = self.data.eval_set();
        let subset = &eval[..eval.len().min(VALIDATION_IMAGES_CAP)];
        let mut counts = ConfusionCounts::zeros(self.data.classes);
        for (features, truth) in subset {
            let probs = self.models[model].forward(features).ok()?;
            let pred = argmax_labels(&probs);
            counts.merge(&confusion(&pred, truth, self.data.classes).ok()?);
        }
        Some(crate::metrics::miou(&counts, AbsentClassRule::ScoreOne))
    }

    /// Runs one iteration: distribution updates, both losses, one optimizer
    /// step per model, and validation on cadence.
    pub fn step(&mut self, t: u64) -> Result<()> {
        let cfg = self.config.clone();
        let (lf, ll) = self.sample_labeled(cfg.batch_labeled);
        let needs_unlabeled = cfg.mode != TrainMode::SupervisedOnly;
        let uf = needs_unlabeled.then(|| self.sample_unlabeled(cfg.batch_unlabeled));

        let fw_l = self.forward_pair(&lf)?;
        let fw_u = match &uf {
            Some(u) => Some(self.forward_pair(u)?),
            None => None,
        };

        // distribution updates before any loss, labeled rows first
        if cfg.mode.uses_matrices() && !cfg.freeze_alignment {
            for m in 0..2 {
                self.aligners[m].update_labeled(&fw_l[m].probs, &ll);
            }
            if let Some(fw_u) = &fw_u {
                for m in 0..2 {
                    let pseudo = argmax_labels(&fw_u[m].probs);
                    self.aligners[m].update_unlabeled(&fw_u[m].probs, &pseudo);
                }
            }
        }
        if cfg.mode == TrainMode::CotrainNaiveDa {
            if let Some(fw_u) = &fw_u {
                for m in 0..2 {
                    let mean = mean_prediction(&fw_u[m].probs);
                    self.naive[m].update_unlabeled(&mean);
                }
            }
        }

        let (l_s, mut grads) = self.supervised_from_forwards(&lf, &ll, &fw_l)?;
        let mut l_u = None;
        let mut mask_frac = [None, None];
        if let (Some(uf), Some(fw_u)) = (&uf, &fw_u) {
            let out = self.unsup_from_forwards(uf, fw_u)?;
            for m in 0..2 {
                grads[m].add_scaled(&out.grads[m], cfg.lambda_u);
            }
            mask_frac = [Some(out.mask_frac[0]), Some(out.mask_frac[1])];
            l_u = Some(out.loss);
        }

        let total = l_s + cfg.lambda_u * l_u.unwrap_or(0.0);
        let diag = |st: &AlignmentState, labeled: bool| -> Vec<f64> {
            (0..self.data.classes)
                .map(|i| if labeled { st.labeled.diagonal(i) } else { st.unlabeled.diagonal(i) })
                .collect()
        };
        let mut record = IterationRecord {
            iter: t,
            l_s,
            l_u,
            mask_frac,
            miou: [None, None],
            diag_labeled: [diag(&self.aligners[0], true), diag(&self.aligners[1], true)],
            diag_unlabeled: [diag(&self.aligners[0], false), diag(&self.aligners[1], false)],
        };
        if !total.is_finite() {
            self.records.push(record);
            return Err(Error::NonFinite { what: "loss", iteration: t });
        }

        let lr = polynomial_lr(cfg.lr, t, cfg.max_iters, cfg.lr_power);
        for m in 0..2 {
            self.models[m].sgd_step(&grads[m], lr, cfg.momentum)?;
        }

        if (t + 1) % cfg.eval_every == 0 {
            for m in 0..2 {
                record.miou[m] = self.validation_miou(m);
                if let Some(v) = record.miou[m] {
                    let better = self.best.as_ref().map_or(true, |b| v > b.miou);
                    if better {
                        self.best = Some(BestCheckpoint {
                            model: m,
                            iter: t,
                            miou: v,
                            state: self.models[m].clone(),
                        });
                    }
                }
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Runs the configured number of iterations.
    pub fn run(&mut self) -> Result<()> {
        for t in 0..self.config.max_iters {
            self.step(t)?;
        }
        Ok(())
    }

    pub fn into_output(self) -> TrainOutput {
        TrainOutput {
            models: self.models,
            aligners: self.aligners,
            records: self.records,
            best: self.best,
        }
    }
}

/// Supervised loss on one labeled batch: per-pixel mean of
/// `-y · [log F1 + log F2]`, with gradients for both models.
pub fn supervised_loss(
    models: &[SegmenterState; 2],
    features: &FeatureMap,
    labels: &LabelMap,
) -> Result<(f64, [GradientBundle; 2])> {
    let classes = models[0].dims.classes;
    let targets = one_hot(labels, classes)?;
    let weights = vec![1.0; features.pixels()];
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(2);
    for m in models {
        let (l, g) = m.backward_weighted_ce(features, &targets, &weights)?;
        loss += l;
        grads.push(g);
    }
    let [g0, g1] = <[GradientBundle; 2]>::try_from(grads).expect("two gradients");
    Ok((loss, [g0, g1]))
}

/// Trains from scratch: the engine loop over `config.max_iters` iterations.
pub fn train(config: TrainConfig, data: DatasetSplit) -> Result<TrainOutput> {
    let mut engine = Engine::new(config, data)?;
    engine.run()?;
    Ok(engine.into_output())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Metric reports for both models plus the index of the better one (by
/// mIoU, ties to model 0).
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub reports: [MetricReport; 2],
    pub better: usize,
}

/// Argmax prediction of one model on one image.
pub fn predict_labels(model: &SegmenterState, features: &FeatureMap) -> Result<LabelMap> {
    Ok(argmax_labels(&model.forward(features)?))
}

/// Evaluates one model over an evaluation set, pooling confusion counts
/// across images. Surface distances are averaged over (image, foreground
/// class) pairs where both surfaces exist.
pub fn evaluate_single(
    model: &SegmenterState,
    eval: &[(&FeatureMap, &LabelMap)],
    classes: usize,
    with_surfaces: bool,
) -> Result<MetricReport> {
    use rayon::prelude::*;
    if eval.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let per_image: Vec<(ConfusionCounts, Option<f64>, Option<f64>, Option<f64>)> = eval
        .par_iter()
        .map(|(features, truth)| -> Result<_> {
            let pred = predict_labels(model, features)?;
            let counts = confusion(&pred, truth, classes)?;
            if with_surfaces {
                let (a, h, h95) = surface_scores(&pred, truth, classes);
                Ok((counts, a, h, h95))
            } else {
                Ok((counts, None, None, None))
            }
        })
        .collect::<Result<_>>()?;
    let mut pooled = ConfusionCounts::zeros(classes);
    let mut asds = Vec::new();
    let mut hds = Vec::new();
    let mut hd95s = Vec::new();
    for (c, a, h, h95) in per_image {
        pooled.merge(&c);
        asds.extend(a);
        hds.extend(h);
        hd95s.extend(h95);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mut report = MetricReport::from_confusion(&pooled);
    report.asd = mean(&asds);
    report.hd = mean(&hds);
    report.hd95 = mean(&hd95s);
    Ok(report)
}

/// Evaluates both models and names the better one.
pub fn evaluate(
    models: &[SegmenterState; 2],
    eval: &[(&FeatureMap, &LabelMap)],
    classes: usize,
    with_surfaces: bool,
) -> Result<EvalOutcome> {
    let r0 = evaluate_single(&models[0], eval, classes, with_surfaces)?;
    let r1 = evaluate_single(&models[1], eval, classes, with_surfaces)?;
    let better = if r1.miou > r0.miou { 1 } else { 0 };
    Ok(EvalOutcome { reports: [r0, r1], better })
}

/// JSON run summary written next to the checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: BTreeMap<String, String>,
    pub iterations: u64,
    /// 1-based best model index, iteration and validation mIoU.
    pub best_model: Option<usize>,
    pub best_iter: Option<u64>,
    pub best_miou: Option<f64>,
    pub final_report_model1: MetricReport,
    pub final_report_model2: MetricReport,
    pub better_model: usize,
    /// Report of the retained best checkpoint on the full evaluation set.
    pub best_report: Option<MetricReport>,
    pub mean_l_s: f64,
    pub mean_l_u: Option<f64>,
    pub wall_clock_seconds: f64,
}
