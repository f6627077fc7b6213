//! A small differentiable per-pixel classifier: an MLP (d -> h -> h -> K,
//! rectifier activations, softmax head) with hand-written backpropagation
//! and SGD-with-momentum, standing in for a full encoder-decoder at desk
//! scale. Two differently seeded instances form the co-training pair.
//!
//! The weighted cross-entropy path accepts arbitrary output probabilities
//! for the logit-layer delta, so the same backward code serves both the
//! supervised loss (raw softmax vs one-hot) and the cross-supervision loss
//! (aligned softmax vs pseudo-label): renormalizing `softmax(z) ⊗ c` by a
//! constant factor vector c equals `softmax(z + log c)`, so the delta is
//! always `weight · (output − target)`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::{FeatureMap, ProbabilityMap};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CODASEG1";

/// Probabilities are clamped here before entering a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Layer dimensions of the per-pixel MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetDims {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// One full set of parameter arrays (also used for momentum buffers and
/// gradients, which share the shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub w1: Vec<f64>, // hidden × inputs
    pub b1: Vec<f64>, // hidden
    pub w2: Vec<f64>, // hidden × hidden
    pub b2: Vec<f64>, // hidden
    pub w3: Vec<f64>, // classes × hidden
    pub b3: Vec<f64>, // classes
}

/// Per-parameter gradients matching [`ParamSet`] shapes.
pub type GradientBundle = ParamSet;

impl ParamSet {
    pub fn zeros(dims: NetDims) -> Self {
        let NetDims { inputs, hidden, classes } = dims;
        Self {
            w1: vec![0.0; hidden * inputs],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; classes * hidden],
            b3: vec![0.0; classes],
        }
    }

    pub fn arrays(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn arrays_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 6] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, componentwise.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for ((_, dst), (_, src)) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Parameters plus optimizer momentum of one pixel classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterState {
    pub dims: NetDims,
    pub seed: u64,
    pub params: ParamSet,
    pub momentum: ParamSet,
}

/// Hidden activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    a1: Vec<f64>, // n × hidden
    a2: Vec<f64>, // n × hidden
}

fn matvec_bias(out: &mut [f64], w: &[f64], x: &[f64], b: &[f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl SegmenterState {
    /// Deterministic init: weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(seed: u64, dims: NetDims) -> Self {
        assert!(dims.inputs >= 1 && dims.hidden >= 1 && dims.classes >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::zeros(dims);
        for (w, fan_in) in [
            (&mut params.w1, dims.inputs),
            (&mut params.w2, dims.hidden),
            (&mut params.w3, dims.hidden),
        ] {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
            for v in w.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Self { dims, seed, params, momentum: ParamSet::zeros(dims) }
    }

    pub fn forward(&self, features: &FeatureMap) -> Result<ProbabilityMap> {
        Ok(self.forward_cached(features)?.0)
    }

    /// Forward pass keeping hidden activations for a later backward pass.
    pub fn forward_cached(&self, features: &FeatureMap) -> Result<(ProbabilityMap, ActivationCache)> {
        let NetDims { inputs, hidden, classes } = self.dims;
        if features.dim != inputs {
            return Err(Error::DimensionMismatch { expected: inputs, got: features.dim });
        }
        let n = features.pixels();
        let p = &self.params;
        let mut a1 = vec![0.0; n * hidden];
        let mut a2 = vec![0.0; n * hidden];
        let mut probs = vec![0.0; n * classes];
        for i in 0..n {
            let x = features.pixel(i);
            let h1 = &mut a1[i * hidden..(i + 1) * hidden];
            matvec_bias(h1, &p.w1, x, &p.b1);
            for v in h1.iter_mut() {
                *v = v.max(0.0);
            }
            let h2 = &mut a2[i * hidden..(i + 1) * hidden];
            matvec_bias(h2, &p.w2, &a1[i * hidden..(i + 1) * hidden], &p.b2);
            for v in h2.iter_mut() {
                *v = v.max(0.0);
            }
            let z = &mut probs[i * classes..(i + 1) * classes];
            matvec_bias(z, &p.w3, &a2[i * hidden..(i + 1) * hidden], &p.b3);
            softmax_in_place(z);
        }
        let map = ProbabilityMap {
            height: features.height,
            width: features.width,
            classes,
            values: probs,
        };
        Ok((map, ActivationCache { a1, a2 }))
    }

    /// Backpropagates arbitrary logit-space gradients (n × K) through the
    /// network given the forward cache of the same batch.
    pub fn backward_logits(
        &self,
        features: &FeatureMap,
        cache: &ActivationCache,
        logit_grads: &[f64],
    ) -> GradientBundle {
        let NetDims { inputs, hidden, classes } = self.dims;
        let n = features.pixels();
        assert_eq!(logit_grads.len(), n * classes);
        let p = &self.params;
        let mut g = ParamSet::zeros(self.dims);
        let mut d2 = vec![0.0; hidden];
        let mut d1 = vec![0.0; hidden];
        for i in 0..n {
            let x = features.pixel(i);
            let a1 = &cache.a1[i * hidden..(i + 1) * hidden];
            let a2 = &cache.a2[i * hidden..(i + 1) * hidden];
            let d3 = &logit_grads[i * classes..(i + 1) * classes];
            if d3.iter().all(|&v| v == 0.0) {
                continue;
            }
            // head layer
            for (k, &dk) in d3.iter().enumerate() {
                g.b3[k] += dk;
                let grow = &mut g.w3[k * hidden..(k + 1) * hidden];
                for (gw, &a) in grow.iter_mut().zip(a2) {
                    *gw += dk * a;
                }
            }
            // delta into a2, masked by the rectifier
            for (j, d) in d2.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &dk) in d3.iter().enumerate() {
                    acc += dk * p.w3[k * hidden + j];
                }
                *d = if a2[j] > 0.0 { acc } else { 0.0 };
            }
            for (j, &dj) in d2.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                g.b2[j] += dj;
                let grow = &mut g.w2[j * hidden..(j + 1) * hidden];
                for (gw, &a) in grow.iter_mut().zip(a1) {
                    *gw += dj * a;
                }
            }
            for (j, d) in d1.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (jj, &dj) in d2.iter().enumerate() {
                    acc += dj * p.w2[jj * hidden + j];
                }
                *d = if a1[j] > 0.0 { acc } else { 0.0 };
            }
            for (j, &dj) in d1.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                g.b1[j] += dj;
                let grow = &mut g.w1[j * inputs..(j + 1) * inputs];
                for (gw, &xv) in grow.iter_mut().zip(x) {
                    *gw += dj * xv;
                }
            }
        }
        g
    }

    /// Weighted cross-entropy against target distributions, on this model's
    /// raw softmax output. Returns the loss and the parameter gradients.
    pub fn backward_weighted_ce(
        &self,
        features: &FeatureMap,
        targets: &ProbabilityMap,
        weights: &[f64],
    ) -> Result<(f64, GradientBundle)> {
        let (probs, cache) = self.forward_cached(features)?;
        let (loss, deltas) = weighted_ce_loss_and_deltas(&probs, targets, weights);
        Ok((loss, self.backward_logits(features, &cache, &deltas)))
    }

    /// One SGD-with-momentum step: `buf <- momentum*buf + grad`,
    /// `param <- param - lr*buf`. Rejects non-finite gradients.
    pub fn sgd_step(&mut self, grads: &GradientBundle, lr: f64, momentum: f64) -> Result<()> {
        for (name, a) in grads.arrays() {
            if let Some(idx) = a.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format {
                    format: "gradient",
                    reason: format!("non-finite gradient in {name}[{idx}] = {}", a[idx]),
                });
            }
        }
        for (((_, buf), (_, g)), (_, p)) in self
            .momentum
            .arrays_mut()
            .into_iter()
            .zip(grads.arrays())
            .zip(self.params.arrays_mut())
        {
            for ((b, &gv), pv) in buf.iter_mut().zip(g).zip(p.iter_mut()) {
                *b = momentum * *b + gv;
                *pv -= lr * *b;
            }
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for dim in [self.dims.inputs, self.dims.hidden, self.dims.classes] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        for set in [&self.params, &self.momentum] {
            for (_, a) in set.arrays() {
                let mut buf = Vec::with_capacity(a.len() * 8);
                for &v in a {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |reason: &str| Error::Format { format: "checkpoint", reason: reason.into() };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let dims = NetDims { inputs: dims[0], hidden: dims[1], classes: dims[2] };
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let seed = u64::from_le_bytes(b);
        let mut read_set = |r: &mut R| -> Result<ParamSet> {
            let mut set = ParamSet::zeros(dims);
            for (_, a) in set.arrays_mut() {
                for v in a.iter_mut() {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    *v = f64::from_le_bytes(b);
                }
            }
            Ok(set)
        };
        let params = read_set(r)?;
        let momentum = read_set(r)?;
        Ok(Self { dims, seed, params, momentum })
    }
}

/// Loss and logit deltas for weighted cross-entropy of `probs` against
/// `targets`: loss averages `-w · Σ_k t_k log p_k` over pixels with positive
/// weight (count floored at 1), deltas are `w (p - t) / denom`.
///
/// `probs` may be raw or aligned output; when aligned, pass the aligned map
/// here and backpropagate the deltas through the raw logits.
pub fn weighted_ce_loss_and_deltas(
    probs: &ProbabilityMap,
    targets: &ProbabilityMap,
    weights: &[f64],
) -> (f64, Vec<f64>) {
    let n = probs.pixels();
    let k = probs.classes;
    assert_eq!(targets.pixels(), n);
    assert_eq!(targets.classes, k);
    assert_eq!(weights.len(), n);
    let active = weights.iter().filter(|&&w| w > 0.0).count();
    let denom = active.max(1) as f64;
    let mut loss = 0.0;
    let mut deltas = vec![0.0; n * k];
    for p in 0..n {
        let w = weights[p];
        if w == 0.0 {
            continue;
        }
        let pr = probs.pixel(p);
        let t = targets.pixel(p);
        let d = &mut deltas[p * k..(p + 1) * k];
        for j in 0..k {
            if t[j] != 0.0 {
                loss -= w * t[j] * pr[j].max(LOG_CLAMP).ln();
            }
            d[j] = w * (pr[j] - t[j]) / denom;
        }
    }
    (loss / denom, deltas)
}

/// Polynomial decay: `base * (1 - step/max_steps)^power`.
pub fn polynomial_lr(base: f64, step: u64, max_steps: u64, power: f64) -> f64 {
    let t = (step as f64 / max_steps as f64).min(1.0);
    base * (1.0 - t).powf(power)
}
