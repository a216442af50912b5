//! Weighted losses and the alternating supervised / jigsaw training loop.
//!
//! Every iteration performs two optimizer steps. The supervised step sees a
//! batch from the labeled subset `D_K` (images kept in their natural tile
//! order) and updates the encoder plus the lesion head. The unsupervised
//! step sees a batch from all training frames, a fraction `s` of which are
//! tile-scrambled, and updates the encoder plus the jigsaw head on `λ·L_U`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetManifest, SplitPlan};
use crate::error::{Error, Result};
use crate::imaging::{AugmentConfig, RescaleFilter, IMAGENET_MEAN, IMAGENET_STD};
use crate::metrics::{self, EvaluationReport};
use crate::model::{DualHeadModel, EncoderDescriptor, Head};
use crate::nn::{softmax, Gradients};
use crate::optim::AdamW;
use crate::permset::{PermutationSet, DEFAULT_POOL_SIZE};
use crate::shuffler::{self, ShuffledSample, TileGridSpec};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_rows(rows: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if rows.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!("weights must be positive: {weights:?}")));
    }
    for (row, &y) in rows.iter().zip(labels) {
        if row.len() != weights.len() {
            return Err(Error::Shape(format!(
                "row of width {} against {} class weights",
                row.len(),
                weights.len()
            )));
        }
        if y >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: row.len(),
            });
        }
    }
    Ok(())
}

/// Mean over the batch of `-w[y] · ln p[y]` for probability rows.
pub fn weighted_nll(probs: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> Result<f64> {
    check_rows(probs, labels, weights)?;
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -weights[y] * p[y].clamp(PROB_FLOOR, 1.0).ln())
        .sum();
    Ok(sum / probs.len() as f64)
}

pub fn weighted_cross_entropy(logits: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> Result<f64> {
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    weighted_nll(&probs, labels, weights)
}

/// Loss and its gradient with respect to each logit row. Where the floor
/// is active the clamped loss is flat, so that row's gradient is zero.
pub fn weighted_cross_entropy_grad(
    logits: &[Vec<f64>],
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_rows(logits, labels, weights)?;
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            let p = softmax(l);
            let w = weights[y];
            loss -= w * p[y].clamp(PROB_FLOOR, 1.0).ln();
            if p[y] < PROB_FLOOR {
                return vec![0.0; p.len()];
            }
            p.iter()
                .enumerate()
                .map(|(c, &pc)| w * (pc - if c == y { 1.0 } else { 0.0 }) / n)
                .collect()
        })
        .collect();
    Ok((loss / n, grads))
}

/// Class-weighted lesion loss, `w` indexed by label.
pub fn supervised_loss(logits: &[Vec<f64>], labels: &[u8], w: &[f64; 2]) -> Result<f64> {
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    weighted_cross_entropy(logits, &labels, w)
}

/// Permutation-weighted jigsaw loss, `w` indexed by pseudo-label.
pub fn unsupervised_loss(logits: &[Vec<f64>], pseudo_labels: &[usize], w: &[f64]) -> Result<f64> {
    weighted_cross_entropy(logits, pseudo_labels, w)
}

/// Inverse frequencies of the pseudo-labels when a fraction `s` of each
/// batch is scrambled uniformly over `P` permutations: `1/(1-s)` for the
/// identity and `P/s` for every scrambled label.
pub fn jigsaw_class_weights(s: f64, permutations: usize) -> Result<Vec<f64>> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::DegenerateWeights(format!(
            "scramble fraction {s} leaves a pseudo-label with zero frequency"
        )));
    }
    if permutations == 0 {
        return Err(Error::InvalidArgument("P must be at least 1".into()));
    }
    let mut w = vec![permutations as f64 / s; permutations + 1];
    w[0] = 1.0 / (1.0 - s);
    Ok(w)
}

/// Number of scrambled samples in a batch of `batch` at fraction `s`.
pub fn scrambled_count(s: f64, batch: usize) -> usize {
    ((s * batch as f64).round() as usize).min(batch)
}

/// Builds one unsupervised batch in which exactly `round(s·B)` randomly
/// chosen samples are scrambled; the rest keep the identity label.
pub fn compose_batch_unsupervised<R: Rng + ?Sized>(
    images: &[Tensor],
    permset: &PermutationSet,
    spec: &TileGridSpec,
    s: f64,
    rng: &mut R,
) -> Result<Vec<ShuffledSample>> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("scramble fraction {s} outside [0, 1]")));
    }
    let n = scrambled_count(s, images.len());
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(rng);
    let mut scramble = vec![false; images.len()];
    for &i in &order[..n] {
        scramble[i] = true;
    }
    images
        .iter()
        .zip(scramble)
        .map(|(img, sc)| shuffler::make_jigsaw_sample(img, permset, spec, sc, rng))
        .collect()
}

/// Which arm of a comparison a configuration belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Baseline,
    Ssl,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Ssl => "ssl",
        }
    }
}

/// Training hyperparameters. Serialized as flat TOML whose keys are the
/// field names; absent keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub lambda_ramp: bool,
    pub lambda_ramp_factor: f64,
    pub lambda_ramp_period: usize,
    /// Fraction `s` of each unsupervised batch that is scrambled.
    #[serde(alias = "s")]
    pub scramble_fraction: f64,
    /// Number of scrambled permutations `P`.
    #[serde(alias = "P")]
    pub permutations: usize,
    pub grid_size: usize,
    pub permutation_pool_size: usize,
    pub permutation_seed: u64,
    pub epochs: usize,
    pub batch_size_supervised: usize,
    pub batch_size_unsupervised: usize,
    pub k_percent: f64,
    pub seed: u64,
    pub encoder: EncoderDescriptor,
    pub image_side: usize,
    pub crop_ratio_range: [f64; 2],
    pub rescale_filter: RescaleFilter,
    pub identity_raw: bool,
    pub augment: bool,
    pub augment_probability: f64,
    /// Weight the supervised loss by inverse class frequency in `D_K`.
    pub class_weighting: bool,
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.005,
            lambda: 1.0,
            lambda_ramp: false,
            lambda_ramp_factor: 1.5,
            lambda_ramp_period: 5,
            scramble_fraction: 0.6,
            permutations: 30,
            grid_size: 3,
            permutation_pool_size: DEFAULT_POOL_SIZE,
            permutation_seed: 0,
            epochs: 30,
            batch_size_supervised: 32,
            batch_size_unsupervised: 32,
            k_percent: 100.0,
            seed: 0,
            encoder: EncoderDescriptor::TinyCnn,
            image_side: 222,
            crop_ratio_range: [0.75, 0.9],
            rescale_filter: RescaleFilter::Bilinear,
            identity_raw: false,
            augment: true,
            augment_probability: 0.5,
            class_weighting: true,
            validate_each_epoch: true,
        }
    }
}

impl TrainConfig {
    /// Per-fraction hyperparameters for each arm, as tuned for the clinical
    /// data set. Only the five standard fractions have presets.
    pub fn preset(arm: Arm, k_percent: f64) -> Result<Self> {
        let slot = dataset::K_PERCENTS
            .iter()
            .position(|&k| k == k_percent)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("no preset for k = {k_percent}%"))
            })?;
        let base = Self {
            k_percent,
            ..Self::default()
        };
        Ok(match arm {
            Arm::Baseline => Self {
                learning_rate: if slot == 0 { 1e-3 } else { 1e-4 },
                weight_decay: [0.005, 0.05, 0.05, 0.2, 0.005][slot],
                lambda: 0.0,
                ..base
            },
            Arm::Ssl => Self {
                learning_rate: 1e-4,
                permutations: if slot == 0 { 100 } else { 30 },
                weight_decay: [0.005, 0.05, 0.07, 0.07, 0.2][slot],
                lambda: [1.0, 1.0, 2.0, 1.5, 1.5][slot],
                lambda_ramp: slot >= 3,
                ..base
            },
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.scramble_fraction) {
            return fail(format!("s = {} must lie in [0, 1]", self.scramble_fraction));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda = {} must be non-negative", self.lambda));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if self.batch_size_supervised == 0 || self.batch_size_unsupervised == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.lambda_ramp_period == 0 {
            return fail("lambda_ramp_period must be positive".into());
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return fail(format!("k_percent = {} outside (0, 100]", self.k_percent));
        }
        self.tile_spec().validate()
    }

    pub fn tile_spec(&self) -> TileGridSpec {
        TileGridSpec {
            grid_size: self.grid_size,
            image_side: self.image_side,
            crop_ratio_range: self.crop_ratio_range,
            rescale_filter: self.rescale_filter,
            identity_raw: self.identity_raw,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            enabled: self.augment,
            probability: self.augment_probability,
            crop_scale: [0.8, 1.0],
            image_side: self.image_side,
            filter: self.rescale_filter,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// `λ` for a zero-based epoch: constant, or multiplied by the ramp factor
/// once per completed ramp period.
pub fn lambda_at(epoch: usize, config: &TrainConfig) -> f64 {
    if config.lambda_ramp {
        let steps = (epoch / config.lambda_ramp_period) as i32;
        config.lambda * config.lambda_ramp_factor.powi(steps)
    } else {
        config.lambda
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub supervised_loss: f64,
    /// `L_U`, absent for models trained without a jigsaw head.
    pub unsupervised_loss: Option<f64>,
    /// `λ·L_U`, the quantity the unsupervised step minimizes.
    pub weighted_unsupervised_loss: Option<f64>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation: Option<EvaluationReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `iteration,phase,loss,lambda`; the unsupervised row's loss is `λ·L_U`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,phase,loss,lambda\n");
        for r in &self.iterations {
            let _ = writeln!(out, "{},supervised,{},{}", r.iteration, r.supervised_loss, r.lambda);
            if let Some(l) = r.weighted_unsupervised_loss {
                let _ = writeln!(out, "{},unsupervised,{},{}", r.iteration, l, r.lambda);
            }
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Images and record ids for one training run. Images are raw `[0, 1]`
/// tensors keyed by manifest record id.
#[derive(Clone, Copy, Debug)]
pub struct TrainingSet<'a> {
    pub manifest: &'a DatasetManifest,
    pub images: &'a HashMap<usize, Tensor>,
    /// `D_K`, labeled frames for the supervised phase.
    pub supervised: &'a BTreeSet<usize>,
    /// `D`, frames for the jigsaw phase.
    pub unsupervised: &'a BTreeSet<usize>,
    pub validation: &'a BTreeSet<usize>,
}

impl<'a> TrainingSet<'a> {
    pub fn from_plan(
        manifest: &'a DatasetManifest,
        images: &'a HashMap<usize, Tensor>,
        plan: &'a SplitPlan,
    ) -> Self {
        Self {
            manifest,
            images,
            supervised: &plan.supervised_record_ids,
            unsupervised: &plan.unsupervised_record_ids,
            validation: &plan.validation_record_ids,
        }
    }

    fn image(&self, id: usize) -> Result<&'a Tensor> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("image for record {id} is not loaded")))
    }

    fn label(&self, id: usize) -> Result<u8> {
        self.manifest
            .label(id)
            .ok_or_else(|| Error::InvalidArgument(format!("record {id} has no label")))
    }
}

/// Loss and gradients of the class-weighted supervised loss for a batch of
/// prepared (normalized) images.
pub fn supervised_gradients(
    model: &DualHeadModel,
    images: &[Tensor],
    labels: &[u8],
    weights: &[f64; 2],
) -> Result<(f64, Gradients)> {
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    head_gradients(model, Head::Supervised, images, &labels, weights, 1.0)
}

/// `L_U` and the gradients of `λ·L_U` for a batch of jigsaw samples.
pub fn unsupervised_gradients(
    model: &DualHeadModel,
    samples: &[ShuffledSample],
    weights: &[f64],
    lambda: f64,
) -> Result<(f64, Gradients)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.pseudo_label).collect();
    head_gradients(model, Head::Jigsaw, &images, &labels, weights, lambda)
}

fn head_gradients(
    model: &DualHeadModel,
    head: Head,
    images: &[Tensor],
    labels: &[usize],
    weights: &[f64],
    scale: f64,
) -> Result<(f64, Gradients)> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut logits = Vec::with_capacity(images.len());
    let mut tapes = Vec::with_capacity(images.len());
    for x in images {
        let (l, tape) = model.forward_taped(head, x)?;
        logits.push(l);
        tapes.push(tape);
    }
    let (loss, dlogits) = weighted_cross_entropy_grad(&logits, labels, weights)?;
    let mut grads = model.params().zero_grads();
    for (tape, d) in tapes.iter().zip(dlogits) {
        let d: Vec<f64> = d.iter().map(|g| g * scale).collect();
        model.backward(head, tape, &d, &mut grads)?;
    }
    Ok((loss, grads))
}

/// One supervised optimizer step; touches only the encoder and lesion head.
pub fn supervised_step(
    model: &mut DualHeadModel,
    opt: &mut AdamW,
    images: &[Tensor],
    labels: &[u8],
    weights: &[f64; 2],
) -> Result<f64> {
    let (loss, grads) = supervised_gradients(model, images, labels, weights)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            phase: "supervised",
            iteration: 0,
        });
    }
    let ids = model.trainable_ids(Head::Supervised)?;
    opt.step(model.params_mut(), &grads, &ids);
    Ok(loss)
}

/// One jigsaw optimizer step on `λ·L_U`; touches only the encoder and
/// jigsaw head. Returns the unscaled `L_U`.
pub fn unsupervised_step(
    model: &mut DualHeadModel,
    opt: &mut AdamW,
    samples: &[ShuffledSample],
    weights: &[f64],
    lambda: f64,
) -> Result<f64> {
    let (loss, grads) = unsupervised_gradients(model, samples, weights, lambda)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            phase: "unsupervised",
            iteration: 0,
        });
    }
    let ids = model.trainable_ids(Head::Jigsaw)?;
    opt.step(model.params_mut(), &grads, &ids);
    Ok(loss)
}

/// Probability of the neoplastic class for a raw image.
pub fn predict_proba(model: &DualHeadModel, raw: &Tensor, augment: &AugmentConfig) -> Result<f64> {
    let x = augment.eval_transform(raw);
    let logits = model.head_logits(Head::Supervised, &model.features(&x)?)?;
    Ok(softmax(&logits)[1])
}

/// Confusion-based metrics plus ROC/AUROC on the given labeled records.
pub fn evaluate(
    model: &DualHeadModel,
    manifest: &DatasetManifest,
    images: &HashMap<usize, Tensor>,
    ids: &BTreeSet<usize>,
    augment: &AugmentConfig,
) -> Result<EvaluationReport> {
    let mut scores = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for &id in ids {
        let raw = images
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("image for record {id} is not loaded")))?;
        scores.push(predict_proba(model, raw, augment)?);
        labels.push(
            manifest
                .label(id)
                .ok_or_else(|| Error::InvalidArgument(format!("record {id} has no label")))?,
        );
    }
    let preds: Vec<u8> = scores.iter().map(|&p| u8::from(p > 0.5)).collect();
    let report = metrics::classification_metrics(metrics::confusion(&preds, &labels)?)?;
    match report.clone().with_scores(&scores, &labels) {
        Ok(r) => Ok(r),
        Err(Error::SingleClass) => Ok(report),
        Err(e) => Err(e),
    }
}

/// Runs the full alternating schedule. Models without a jigsaw head train
/// the supervised phase only, over the same number of iterations.
pub fn train(
    model: &mut DualHeadModel,
    data: &TrainingSet<'_>,
    permset: Option<&PermutationSet>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    let ssl = model.has_jigsaw_head();
    let permset = match (ssl, permset) {
        (true, Some(p)) => {
            if p.len() != config.permutations || p.grid_size() != config.grid_size {
                return Err(Error::Config(format!(
                    "permutation set (grid {}, P {}) does not match config (grid {}, P {})",
                    p.grid_size(),
                    p.len(),
                    config.grid_size,
                    config.permutations
                )));
            }
            model.set_permset(p)?;
            Some(p)
        }
        (true, None) => {
            return Err(Error::InvalidArgument(
                "a jigsaw head needs a permutation set".into(),
            ))
        }
        (false, _) => None,
    };
    let supervised: Vec<usize> = data.supervised.iter().copied().collect();
    let unsupervised: Vec<usize> = data.unsupervised.iter().copied().collect();
    if supervised.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let weights = if config.class_weighting {
        dataset::class_weights(data.manifest, data.supervised)?
    } else {
        [1.0, 1.0]
    };
    let jigsaw_weights = match permset {
        Some(p) => jigsaw_class_weights(config.scramble_fraction, p.len())?,
        None => Vec::new(),
    };
    let spec = config.tile_spec();
    let augment = config.augment_config();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(model.params(), config.learning_rate, config.weight_decay);
    let iterations_per_epoch = if unsupervised.is_empty() {
        supervised.len().div_ceil(config.batch_size_supervised)
    } else {
        unsupervised.len().div_ceil(config.batch_size_unsupervised)
    };

    let mut history = TrainHistory::default();
    let mut sup_order = supervised.clone();
    sup_order.shuffle(&mut rng);
    let mut sup_cursor = 0;
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        let lambda = lambda_at(epoch, config);
        let mut unsup_order = unsupervised.clone();
        unsup_order.shuffle(&mut rng);
        for it in 0..iterations_per_epoch {
            let mut images = Vec::with_capacity(config.batch_size_supervised);
            let mut labels = Vec::with_capacity(config.batch_size_supervised);
            for _ in 0..config.batch_size_supervised.min(supervised.len()) {
                if sup_cursor == sup_order.len() {
                    sup_order.shuffle(&mut rng);
                    sup_cursor = 0;
                }
                let id = sup_order[sup_cursor];
                sup_cursor += 1;
                images.push(augment.train_transform(data.image(id)?, &mut rng));
                labels.push(data.label(id)?);
            }
            let (sup_loss, grads) = supervised_gradients(model, &images, &labels, &weights)?;
            if !sup_loss.is_finite() {
                return Err(Error::Divergence {
                    phase: "supervised",
                    iteration,
                });
            }
            let ids = model.trainable_ids(Head::Supervised)?;
            opt.step(model.params_mut(), &grads, &ids);

            let mut record = IterationRecord {
                iteration,
                epoch,
                supervised_loss: sup_loss,
                unsupervised_loss: None,
                weighted_unsupervised_loss: None,
                lambda,
            };
            if let Some(p) = permset {
                let start = it * config.batch_size_unsupervised;
                let end = (start + config.batch_size_unsupervised).min(unsup_order.len());
                let raw: Vec<Tensor> = unsup_order[start..end]
                    .iter()
                    .map(|&id| Ok(augment.train_transform(data.image(id)?, &mut rng)))
                    .collect::<Result<_>>()?;
                let samples =
                    compose_batch_unsupervised(&raw, p, &spec, config.scramble_fraction, &mut rng)?;
                let (u_loss, grads) = unsupervised_gradients(model, &samples, &jigsaw_weights, lambda)?;
                if !u_loss.is_finite() {
                    return Err(Error::Divergence {
                        phase: "unsupervised",
                        iteration,
                    });
                }
                let ids = model.trainable_ids(Head::Jigsaw)?;
                opt.step(model.params_mut(), &grads, &ids);
                record.unsupervised_loss = Some(u_loss);
                record.weighted_unsupervised_loss = Some(lambda * u_loss);
            }
            log::debug!(
                "epoch {epoch} iteration {iteration}: L_S {:.4} L_U {:?}",
                record.supervised_loss,
                record.unsupervised_loss
            );
            history.iterations.push(record);
            iteration += 1;
        }
        let validation = if config.validate_each_epoch && !data.validation.is_empty() {
            Some(evaluate(model, data.manifest, data.images, data.validation, &augment)?)
        } else {
            None
        };
        if let Some(v) = &validation {
            log::info!("epoch {epoch}: validation accuracy {:.4}", v.accuracy);
        }
        history.epochs.push(EpochRecord { epoch, validation });
    }
    Ok(history)
}
