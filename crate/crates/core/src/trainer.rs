//! Desk-scale child model: a one-hidden-layer tanh MLP (or softmax
//! regression when `hidden_units == 0`) on flattened, normalised pixels,
//! trained by mini-batch SGD with global-norm gradient clipping.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::cutout_patch;
use crate::data::{DatasetKind, DatasetSplits, Example, Normalization};
use crate::image::Image;
use crate::pbt::{Trainable, TrainableError};
use crate::policy::{apply_policy, PolicyParams, Schedule, StationarySampler};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("split is empty")]
    EmptySplit,
    #[error("model expects {expected} inputs, example has {found}")]
    InputShape { expected: usize, found: usize },
    #[error("invalid `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// One cosine annealing cycle over `epochs`.
    Cosine,
    /// Multiply by 0.2 at 30%, 60% and 80% of `epochs`.
    Step,
}

fn default_clip() -> f64 {
    5.0
}
fn default_hidden() -> usize {
    32
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_clip")]
    pub gradient_clip: f64,
    #[serde(default = "default_hidden")]
    pub hidden_units: usize,
    /// Fixed cutout in the baseline pipeline.
    #[serde(default = "default_true")]
    pub baseline_cutout: bool,
    /// Seed for model initialisation and data order when replaying schedules.
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 30,
            lr_schedule: LrSchedule::Constant,
            gradient_clip: default_clip(),
            hidden_units: default_hidden(),
            baseline_cutout: true,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: String| Err(TrainError::Config { field, reason });
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(
                "learning_rate",
                format!("must be non-negative, got {}", self.learning_rate),
            );
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(
                "weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.gradient_clip > 0.0) {
            return bad(
                "gradient_clip",
                format!("must be positive, got {}", self.gradient_clip),
            );
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let progress = epoch as f64 / self.epochs.max(1) as f64;
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
            LrSchedule::Step => {
                let drops = [0.3, 0.6, 0.8].iter().filter(|&&m| progress >= m).count();
                self.learning_rate * 0.2f64.powi(drops as i32)
            }
        }
    }
}

/// Supplies the augmentation policy for each mini-batch.
pub trait PolicySource {
    fn next_policy(&mut self, rng: &mut rng::Rng) -> Option<&PolicyParams>;

    /// Extra per-image transform after the policy. Identity by default.
    fn augment(&mut self, img: Image, _rng: &mut rng::Rng) -> Image {
        img
    }
}

/// No learned augmentation; baseline pipeline only.
pub struct NoPolicy;

impl PolicySource for NoPolicy {
    fn next_policy(&mut self, _rng: &mut rng::Rng) -> Option<&PolicyParams> {
        None
    }
}

pub struct FixedPolicy<'a>(pub &'a PolicyParams);

impl PolicySource for FixedPolicy<'_> {
    fn next_policy(&mut self, _rng: &mut rng::Rng) -> Option<&PolicyParams> {
        Some(self.0)
    }
}

impl PolicySource for StationarySampler {
    fn next_policy(&mut self, rng: &mut rng::Rng) -> Option<&PolicyParams> {
        Some(self.sample(rng))
    }
}

/// Epoch-indexed lookup into a schedule.
pub struct ScheduledPolicy<'a> {
    pub schedule: &'a Schedule,
    pub epoch: usize,
}

impl PolicySource for ScheduledPolicy<'_> {
    fn next_policy(&mut self, _rng: &mut rng::Rng) -> Option<&PolicyParams> {
        self.schedule
            .at(self.epoch.min(self.schedule.epochs() - 1))
            .ok()
    }
}

/// Explicit random choices of the baseline pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineDraw {
    /// Crop offset relative to the centred crop, in `-pad..=pad`.
    pub dx: i64,
    pub dy: i64,
    pub flip: bool,
    /// Cutout centre, `None` when cutout is disabled.
    pub cutout_center: Option<(usize, usize)>,
}

/// Pad width at this image size: 4 pixels at 32x32, scaled proportionally.
pub fn crop_padding(img: &Image) -> i64 {
    (4.0 * img.width().min(img.height()) as f64 / 32.0).round() as i64
}

/// Cutout edge at this image size: 16 pixels at 32x32, scaled proportionally.
pub fn baseline_cutout_size(img: &Image) -> usize {
    (16.0 * img.width().min(img.height()) as f64 / 32.0).round() as usize
}

/// Standard pad-and-crop, horizontal flip (natural images only) and a fixed
/// cutout. Normalisation happens later, at feature extraction.
pub fn baseline_pipeline<R: Rng + ?Sized>(
    img: &Image,
    kind: DatasetKind,
    cutout: bool,
    rng: &mut R,
) -> Image {
    let pad = crop_padding(img);
    let dx = rng.gen_range(-pad..=pad);
    let dy = rng.gen_range(-pad..=pad);
    let flip = kind == DatasetKind::Natural && rng.gen_bool(0.5);
    let out = baseline_with(
        img,
        BaselineDraw {
            dx,
            dy,
            flip,
            cutout_center: None,
        },
    );
    if cutout {
        cutout_patch(&out, baseline_cutout_size(img), rng)
    } else {
        out
    }
}

/// Deterministic core of [`baseline_pipeline`]. Padding is zero.
pub fn baseline_with(img: &Image, draw: BaselineDraw) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let sx = x as i64 + draw.dx;
            let sy = y as i64 + draw.dy;
            let sx = if draw.flip { w as i64 - 1 - sx } else { sx };
            let inside = sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h;
            for c in 0..img.channels() {
                out.set(
                    x,
                    y,
                    c,
                    if inside {
                        img.get(sx as usize, sy as usize, c)
                    } else {
                        0
                    },
                );
            }
        }
    }
    match draw.cutout_center {
        Some((cx, cy)) => crate::augment::cutout_at(&out, baseline_cutout_size(img), cx, cy),
        None => out,
    }
}

/// Dense layer, `out x in` row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let mut d = Self::zeros(rows, cols);
        for w in &mut d.weights {
            *w = rng.gen_range(-a..a);
        }
        d
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().copied());
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Gradients with the same layout as the model's layers.
pub type Gradients = Vec<Dense>;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    layers: Vec<Dense>,
    epochs_trained: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub train_accuracy: f64,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PBAC";
const CHECKPOINT_VERSION: u32 = 1;

impl ToyClassifier {
    pub fn new(input_dim: usize, hidden_units: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layers = if hidden_units == 0 {
            vec![Dense::glorot(classes, input_dim, &mut rng)]
        } else {
            vec![
                Dense::glorot(hidden_units, input_dim, &mut rng),
                Dense::glorot(classes, hidden_units, &mut rng),
            ]
        };
        Self {
            layers,
            epochs_trained: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("at least one layer").rows
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Weights then bias, layer by layer.
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().expect("flat parameter vector too short");
            }
        }
    }

    /// Returns the activations of every layer; the last entry is the logits.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut input = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(l.rows);
            l.forward(&input, &mut out);
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out.clone());
            input = out;
        }
        acts
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.forward(x).pop().expect("logits");
        argmax(&logits)
    }

    /// Mean softmax cross-entropy over the batch plus `0.5 * wd * |W|^2`
    /// (weights only), and its gradient.
    pub fn loss_and_grad(
        &self,
        xs: &[Vec<f64>],
        ys: &[usize],
        weight_decay: f64,
    ) -> (f64, Gradients) {
        let mut grads: Gradients = self
            .layers
            .iter()
            .map(|l| Dense::zeros(l.rows, l.cols))
            .collect();
        let n = xs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.forward(x);
            let logits = acts.last().expect("logits");
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += -(exps[y] / z).ln();
            let mut delta: Vec<f64> = exps.iter().map(|e| e / z / n).collect();
            delta[y] -= 1.0 / n;
            for li in (0..self.layers.len()).rev() {
                let input: &[f64] = if li == 0 { x } else { &acts[li - 1] };
                let layer = &self.layers[li];
                let g = &mut grads[li];
                for r in 0..layer.rows {
                    g.bias[r] += delta[r];
                    let row = &mut g.weights[r * layer.cols..(r + 1) * layer.cols];
                    for (gw, v) in row.iter_mut().zip(input) {
                        *gw += delta[r] * v;
                    }
                }
                if li > 0 {
                    let mut next = vec![0.0; layer.cols];
                    for r in 0..layer.rows {
                        let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                        for (nv, w) in next.iter_mut().zip(row) {
                            *nv += w * delta[r];
                        }
                    }
                    // tanh'
                    for (nv, a) in next.iter_mut().zip(&acts[li - 1]) {
                        *nv *= 1.0 - a * a;
                    }
                    delta = next;
                }
            }
        }
        loss /= n;
        if weight_decay > 0.0 {
            for (l, g) in self.layers.iter().zip(grads.iter_mut()) {
                loss += 0.5 * weight_decay * l.weights.iter().map(|w| w * w).sum::<f64>();
                for (gw, w) in g.weights.iter_mut().zip(&l.weights) {
                    *gw += weight_decay * w;
                }
            }
        }
        (loss, grads)
    }

    fn sgd_step(&mut self, grads: &Gradients, lr: f64, clip: f64) {
        let norm = grads
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        for (l, g) in self.layers.iter_mut().zip(grads) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * scale * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * scale * gb;
            }
        }
    }

    /// One shuffled pass over `train`.
    ///
    /// Data order, crops, flips and baseline cutout draw from `rng`. Policy
    /// sampling and policy application draw from a child stream seeded by a
    /// single draw from `rng` at the start of the epoch, so the main stream
    /// advances identically with or without a learned policy.
    pub fn train_epoch(
        &mut self,
        train: &[Example],
        norm: &Normalization,
        kind: DatasetKind,
        policy: &mut dyn PolicySource,
        cfg: &TrainerConfig,
        rng: &mut rng::Rng,
    ) -> Result<EpochStats, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptySplit);
        }
        let mut aug_rng = rng::Rng::from_seed(rng.gen());
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        let lr = cfg.lr_at(self.epochs_trained);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_policy = policy.next_policy(&mut aug_rng).cloned();
            let mut xs = Vec::with_capacity(batch.len());
            let mut ys = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &train[i];
                let mut img = baseline_pipeline(&ex.image, kind, cfg.baseline_cutout, rng);
                if let Some(p) = &batch_policy {
                    img = apply_policy(&img, p, &mut aug_rng);
                }
                let img = policy.augment(img, &mut aug_rng);
                let x = norm.features(&img);
                if x.len() != self.input_dim() {
                    return Err(TrainError::InputShape {
                        expected: self.input_dim(),
                        found: x.len(),
                    });
                }
                if self.predict(&x) == ex.label {
                    correct += 1;
                }
                xs.push(x);
                ys.push(ex.label);
            }
            let (loss, grads) = self.loss_and_grad(&xs, &ys, cfg.weight_decay);
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: self.epochs_trained,
                    batch: batch_idx,
                    loss,
                });
            }
            loss_sum += loss * batch.len() as f64;
            self.sgd_step(&grads, lr, cfg.gradient_clip);
        }
        self.epochs_trained += 1;
        if !self.is_finite() {
            return Err(TrainError::NonFinite {
                epoch: self.epochs_trained - 1,
                batch: order.len(),
                loss: f64::NAN,
            });
        }
        Ok(EpochStats {
            loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
        })
    }

    /// Fraction of correct argmax predictions, no augmentation.
    pub fn evaluate(&self, split: &[Example], norm: &Normalization) -> Result<f64, TrainError> {
        if split.is_empty() {
            return Err(TrainError::EmptySplit);
        }
        let correct = split
            .iter()
            .filter(|ex| self.predict(&norm.features(&ex.image)) == ex.label)
            .count();
        Ok(correct as f64 / split.len() as f64)
    }

    /// Versioned little-endian blob: magic, version, epochs trained, layer
    /// count, then per layer `rows`, `cols`, weights and bias.
    pub fn save_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.epochs_trained as u64).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.rows as u32).to_le_bytes());
            out.extend_from_slice(&(l.cols as u32).to_le_bytes());
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Restores a checkpoint produced by a model of the same shape.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let epochs = r.u64()? as usize;
        let count = r.u32()? as usize;
        if count != self.layers.len() {
            return Err(TrainError::Checkpoint(format!(
                "{count} layers, model has {}",
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for l in &self.layers {
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if (rows, cols) != (l.rows, l.cols) {
                return Err(TrainError::Checkpoint(format!(
                    "layer shape {rows}x{cols}, model has {}x{}",
                    l.rows, l.cols
                )));
            }
            let mut d = Dense::zeros(rows, cols);
            for v in d.weights.iter_mut().chain(d.bias.iter_mut()) {
                *v = r.f64()?;
            }
            layers.push(d);
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        self.layers = layers;
        self.epochs_trained = epochs;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| {
            TrainError::Checkpoint(format!(
                "truncated at byte {}: need {n} more, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// [`ToyClassifier`] bound to a dataset, as seen by the search.
pub struct ClassifierTrial {
    pub model: ToyClassifier,
    pub data: Arc<DatasetSplits>,
    pub cfg: TrainerConfig,
}

impl ClassifierTrial {
    pub fn new(data: Arc<DatasetSplits>, cfg: TrainerConfig, seed: u64) -> Self {
        let model = ToyClassifier::new(data.input_dim(), cfg.hidden_units, data.class_count, seed);
        Self { model, data, cfg }
    }
}

impl Trainable for ClassifierTrial {
    fn train_epoch(
        &mut self,
        policy: &PolicyParams,
        rng: &mut rng::Rng,
    ) -> Result<(), TrainableError> {
        self.model.train_epoch(
            &self.data.train,
            &self.data.normalization,
            self.data.kind,
            &mut FixedPolicy(policy),
            &self.cfg,
            rng,
        )?;
        Ok(())
    }

    fn evaluate(&self) -> Result<f64, TrainableError> {
        Ok(self
            .model
            .evaluate(&self.data.val, &self.data.normalization)?)
    }

    fn save_checkpoint(&self) -> Vec<u8> {
        self.model.save_checkpoint()
    }

    fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), TrainableError> {
        Ok(self.model.load_checkpoint(bytes)?)
    }
}
