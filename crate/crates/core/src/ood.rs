//! Out-of-distribution scoring with the class posterior and the jigsaw head.
//!
//! `κ = KL[U ‖ p(y|x)] + jigsaw cross-entropy`. The first term measures how
//! far the lesion posterior is from uniform; the second is the weighted
//! jigsaw loss on the (re)tiled input. A model trained on one imaging
//! modality should solve the puzzle worse on another, which raises κ.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, RocPoint};
use crate::model::{DualHeadModel, Head};
use crate::nn::softmax;
use crate::permset::PermutationSet;
use crate::shuffler::{self, TileGridSpec};
use crate::tensor::Tensor;
use crate::training::{jigsaw_class_weights, PROB_FLOOR};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodMode {
    /// KL term only; the comparator for models without a jigsaw head.
    KlOnly,
    /// Jigsaw term on the identity-tiled image with pseudo-label 0.
    #[default]
    Identity,
    /// Jigsaw term averaged over the identity tiling and `M` random
    /// scrambles, each scored against its own pseudo-label.
    Scramble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    pub mode: OodMode,
    /// `M` for [`OodMode::Scramble`].
    pub scrambles: usize,
    /// Flip the sign of the KL term.
    pub negate_kl: bool,
    /// Scramble fraction used in training; sets the pseudo-label weights.
    pub scramble_fraction: f64,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            mode: OodMode::Identity,
            scrambles: 4,
            negate_kl: false,
            scramble_fraction: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub kappa: f64,
    /// Signed KL contribution (negative when `negate_kl` is set).
    pub kl_term: f64,
    pub jigsaw_term: f64,
    pub mode: OodMode,
}

/// `Σ_y U(y) ln(U(y) / p(y))` with `p` clamped below at 1e-12.
pub fn kl_from_uniform(posterior: &[f64]) -> Result<f64> {
    let sum: f64 = posterior.iter().sum();
    if posterior.is_empty() || (sum - 1.0).abs() > 1e-6 || posterior.iter().any(|&p| p < 0.0) {
        return Err(Error::NotNormalized(sum));
    }
    let u = 1.0 / posterior.len() as f64;
    Ok(posterior
        .iter()
        .map(|&p| u * (u / p.max(PROB_FLOOR)).ln())
        .sum())
}

fn jigsaw_nll(model: &DualHeadModel, image: &Tensor, label: usize, weights: &[f64]) -> Result<f64> {
    let logits = model.head_logits(Head::Jigsaw, &model.features(image)?)?;
    let p = softmax(&logits);
    Ok(-weights[label] * p[label].clamp(PROB_FLOOR, 1.0).ln())
}

/// Scores one prepared (resized, normalized) image.
pub fn ood_score(
    model: &DualHeadModel,
    image: &Tensor,
    permset: Option<&PermutationSet>,
    spec: &TileGridSpec,
    config: &OodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<OodScore> {
    let posterior = softmax(&model.head_logits(Head::Supervised, &model.features(image)?)?);
    let kl = kl_from_uniform(&posterior)?;
    let kl_term = if config.negate_kl { -kl } else { kl };
    let jigsaw_term = match config.mode {
        OodMode::KlOnly => 0.0,
        mode => {
            if !model.has_jigsaw_head() {
                return Err(Error::Capability("OOD scoring needs a jigsaw head".into()));
            }
            let permset = permset
                .ok_or_else(|| Error::InvalidArgument("jigsaw scoring needs a permutation set".into()))?;
            let weights = jigsaw_class_weights(config.scramble_fraction, permset.len())?;
            let identity = shuffler::make_jigsaw_sample_with_label(image, permset, spec, 0, rng)?;
            let mut total = jigsaw_nll(model, &identity.image, 0, &weights)?;
            let mut count = 1;
            if mode == OodMode::Scramble {
                for _ in 0..config.scrambles {
                    let s = shuffler::make_jigsaw_sample(image, permset, spec, true, rng)?;
                    total += jigsaw_nll(model, &s.image, s.pseudo_label, &weights)?;
                    count += 1;
                }
            }
            total / count as f64
        }
    };
    Ok(OodScore {
        kappa: kl_term + jigsaw_term,
        kl_term,
        jigsaw_term,
        mode: config.mode,
    })
}

/// Scores a list of prepared images. Each image gets its own random
/// stream derived from `seed` and its position, so results do not depend
/// on evaluation order.
pub fn score_images(
    model: &DualHeadModel,
    images: &[Tensor],
    permset: Option<&PermutationSet>,
    spec: &TileGridSpec,
    config: &OodConfig,
    seed: u64,
) -> Result<Vec<OodScore>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            ood_score(model, img, permset, spec, config, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodEvaluation {
    pub auroc: f64,
    pub roc: Vec<RocPoint>,
    pub in_scores: Vec<OodScore>,
    pub out_scores: Vec<OodScore>,
}

impl OodEvaluation {
    /// `set,kappa,kl_term,jigsaw_term` with `set` = `in` or `out`.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("set,label,kappa,kl_term,jigsaw_term\n");
        for (name, label, scores) in [("in", 0, &self.in_scores), ("out", 1, &self.out_scores)] {
            for s in scores {
                out.push_str(&format!(
                    "{name},{label},{},{},{}\n",
                    s.kappa, s.kl_term, s.jigsaw_term
                ));
            }
        }
        out
    }
}

/// Scores in-distribution samples (label 0) against out-of-distribution
/// samples (label 1) and summarizes κ by AUROC.
pub fn evaluate_ood(
    model: &DualHeadModel,
    in_samples: &[Tensor],
    out_samples: &[Tensor],
    permset: Option<&PermutationSet>,
    spec: &TileGridSpec,
    config: &OodConfig,
    seed: u64,
) -> Result<OodEvaluation> {
    if in_samples.is_empty() || out_samples.is_empty() {
        return Err(Error::SingleClass);
    }
    let in_scores = score_images(model, in_samples, permset, spec, config, seed)?;
    let out_scores = score_images(model, out_samples, permset, spec, config, seed ^ 0x9e37_79b9)?;
    let kappas: Vec<f64> = in_scores.iter().chain(&out_scores).map(|s| s.kappa).collect();
    let labels: Vec<u8> = std::iter::repeat(0)
        .take(in_scores.len())
        .chain(std::iter::repeat(1).take(out_scores.len()))
        .collect();
    Ok(OodEvaluation {
        auroc: metrics::auroc(&kappas, &labels)?,
        roc: metrics::roc_curve(&kappas, &labels)?,
        in_scores,
        out_scores,
    })
}
