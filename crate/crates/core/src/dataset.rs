//! Manifest-driven dataset model: labeled and unlabeled frames grouped by
//! source video, video-level validation splits, nested labeled-fraction
//! selection and a synthetic generator for desk-scale runs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging;
use crate::tensor::Tensor;

pub const NON_NEOPLASTIC: u8 = 0;
pub const NEOPLASTIC: u8 = 1;

/// Labeled fractions swept in the full protocol, in percent.
pub const K_PERCENTS: [f64; 5] = [100.0, 50.0, 25.0, 12.5, 6.25];

pub const MANIFEST_HEADER: &str = "image_path,video_id,label,modality";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "WLI")]
    Wli,
    #[serde(rename = "NBI")]
    Nbi,
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "WLI" => Ok(Self::Wli),
            "NBI" => Ok(Self::Nbi),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Wli => "WLI",
            Self::Nbi => "NBI",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub video_id: String,
    pub label: Option<u8>,
    pub modality: Modality,
}

impl SampleRecord {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }
}

/// Records are addressed by their row index (`record id`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut paths = HashSet::new();
        let mut video_labels: HashMap<&str, u8> = HashMap::new();
        for r in &self.records {
            if !paths.insert(&r.image_path) {
                return Err(Error::Consistency(format!(
                    "duplicate image path {}",
                    r.image_path.display()
                )));
            }
            if let Some(l) = r.label {
                if l > 1 {
                    return Err(Error::Consistency(format!("label {l} outside {{0, 1}}")));
                }
                match video_labels.insert(&r.video_id, l) {
                    Some(prev) if prev != l => {
                        return Err(Error::Consistency(format!(
                            "video {} carries labels {prev} and {l}",
                            r.video_id
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.records.iter().filter(|r| r.is_labeled()).count()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.len() - self.num_labeled()
    }

    pub fn count_modality(&self, m: Modality) -> usize {
        self.records.iter().filter(|r| r.modality == m).count()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.records.iter().filter(|r| r.label == Some(label)).count()
    }

    pub fn ids_where(&self, pred: impl Fn(&SampleRecord) -> bool) -> BTreeSet<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(r))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn resolve(&self, id: usize) -> PathBuf {
        let p = &self.records[id].image_path;
        if p.is_absolute() {
            p.clone()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn label(&self, id: usize) -> Option<u8> {
        self.records[id].label
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let label = r.label.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.image_path.display(),
                r.video_id,
                label,
                r.modality
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Manifest restricted to `ids`, keeping the base directory.
    pub fn subset(&self, ids: &BTreeSet<usize>) -> Self {
        Self {
            records: ids.iter().map(|&i| self.records[i].clone()).collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Parses a manifest CSV, reporting errors with their line number. Relative
/// image paths are resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let mut text = String::new();
    fs::File::open(path)?.read_to_string(&mut text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, path, base)
}

pub fn parse_manifest(text: &str, path: &Path, base_dir: PathBuf) -> Result<DatasetManifest> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if !headers.is_empty() && headers.iter().collect::<Vec<_>>().join(",") != MANIFEST_HEADER {
        return Err(parse_err(1, format!("expected header `{MANIFEST_HEADER}`")));
    }
    let mut records = Vec::new();
    let mut seen_paths = HashSet::new();
    let mut video_labels: HashMap<String, u8> = HashMap::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", row.len())));
        }
        let image_path = PathBuf::from(&row[0]);
        if row[0].is_empty() || row[1].is_empty() {
            return Err(parse_err(line, "image_path and video_id are required".into()));
        }
        let label = match &row[2] {
            "" => None,
            "0" => Some(NON_NEOPLASTIC),
            "1" => Some(NEOPLASTIC),
            other => return Err(parse_err(line, format!("label `{other}` is not 0 or 1"))),
        };
        let modality = row[3].parse::<Modality>().map_err(|e| parse_err(line, e))?;
        if !seen_paths.insert(image_path.clone()) {
            return Err(parse_err(
                line,
                format!("duplicate image path {}", image_path.display()),
            ));
        }
        if let Some(l) = label {
            match video_labels.insert(row[1].to_string(), l) {
                Some(prev) if prev != l => {
                    return Err(Error::Consistency(format!(
                        "line {line}: video {} already labeled {prev}, found {l}",
                        &row[1]
                    )))
                }
                _ => {}
            }
        }
        records.push(SampleRecord {
            image_path,
            video_id: row[1].to_string(),
            label,
            modality,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    Ok(DatasetManifest { records, base_dir })
}

/// Rounds halves away from zero for non-negative values.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Splits `total` integer units proportionally to `weights` by largest
/// remainder; equal remainders favour the larger weight, then the lower index.
pub fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights
        .iter()
        .map(|&w| total as f64 * w as f64 / sum as f64)
        .collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra)
            .unwrap()
            .then(weights[b].cmp(&weights[a]))
            .then(a.cmp(&b))
    });
    let mut left = total - out.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldStrategy {
    /// Every fold draws its own validation videos with a fold-specific seed.
    #[default]
    IndependentRedraw,
    /// Videos are dealt round-robin so each lands in exactly one fold.
    Rotation,
}

/// One cross-validation split, optionally narrowed to a labeled fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub fold_index: usize,
    pub validation_video_ids: BTreeSet<String>,
    pub validation_record_ids: BTreeSet<usize>,
    pub k_percent: f64,
    /// `D_K`: labeled training frames used by the supervised phase.
    pub supervised_record_ids: BTreeSet<usize>,
    /// `D`: every training frame, labeled or not, outside validation videos.
    pub unsupervised_record_ids: BTreeSet<usize>,
}

impl SplitPlan {
    /// All labeled training frames (the `k = 100` pool).
    pub fn labeled_training_ids(&self, manifest: &DatasetManifest) -> BTreeSet<usize> {
        self.unsupervised_record_ids
            .iter()
            .copied()
            .filter(|&i| manifest.records[i].is_labeled())
            .collect()
    }

    /// A copy of this fold whose supervised set holds `k_percent` of the
    /// labeled training frames. Validation and unsupervised sets are kept.
    pub fn with_fraction(
        &self,
        manifest: &DatasetManifest,
        k_percent: f64,
        seed: u64,
    ) -> Result<Self> {
        let pool = self.labeled_training_ids(manifest);
        let selected = select_labeled_fraction(manifest, &pool, k_percent, seed)?;
        Ok(Self {
            k_percent,
            supervised_record_ids: selected,
            ..self.clone()
        })
    }
}

fn labeled_videos(manifest: &DatasetManifest) -> BTreeMap<String, (u8, usize)> {
    let mut videos: BTreeMap<String, (u8, usize)> = BTreeMap::new();
    for r in &manifest.records {
        if let Some(l) = r.label {
            videos.entry(r.video_id.clone()).or_insert((l, 0)).1 += 1;
        }
    }
    videos
}

fn plan_from_validation(
    manifest: &DatasetManifest,
    fold_index: usize,
    validation_video_ids: BTreeSet<String>,
) -> SplitPlan {
    let validation_record_ids = manifest
        .ids_where(|r| r.is_labeled() && validation_video_ids.contains(&r.video_id));
    let unsupervised_record_ids =
        manifest.ids_where(|r| !validation_video_ids.contains(&r.video_id));
    let supervised_record_ids = unsupervised_record_ids
        .iter()
        .copied()
        .filter(|&i| manifest.records[i].is_labeled())
        .collect();
    SplitPlan {
        fold_index,
        validation_video_ids,
        validation_record_ids,
        k_percent: 100.0,
        supervised_record_ids,
        unsupervised_record_ids,
    }
}

/// Video-level cross-validation folds with `k = 100`. Each fold withholds
/// roughly `val_fraction` of each class's labeled frames; videos are never
/// split between validation and training.
pub fn make_folds(
    manifest: &DatasetManifest,
    n_folds: usize,
    val_fraction: f64,
    seed: u64,
    strategy: FoldStrategy,
) -> Result<Vec<SplitPlan>> {
    if n_folds == 0 || !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "need n_folds > 0 and val_fraction in [0, 1), got {n_folds} and {val_fraction}"
        )));
    }
    let videos = labeled_videos(manifest);
    let mut by_class: [Vec<(String, usize)>; 2] = [Vec::new(), Vec::new()];
    for (vid, &(label, frames)) in &videos {
        by_class[label as usize].push((vid.clone(), frames));
    }
    for (label, vids) in by_class.iter().enumerate() {
        if vids.len() < n_folds.max(2) {
            return Err(Error::Stratification(format!(
                "class {label} has {} labeled videos, need at least {}",
                vids.len(),
                n_folds.max(2)
            )));
        }
    }
    let mut folds: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n_folds];
    match strategy {
        FoldStrategy::Rotation => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for vids in &by_class {
                let mut shuffled = vids.clone();
                shuffled.shuffle(&mut rng);
                // Largest videos first, each to the currently lightest fold.
                shuffled.sort_by(|a, b| b.1.cmp(&a.1));
                let mut load = vec![0usize; n_folds];
                for (i, (vid, frames)) in shuffled.into_iter().enumerate() {
                    let target = if i < n_folds {
                        i
                    } else {
                        (0..n_folds).min_by_key(|&f| (load[f], f)).unwrap()
                    };
                    load[target] += frames;
                    folds[target].insert(vid);
                }
            }
        }
        FoldStrategy::IndependentRedraw => {
            for (f, fold) in folds.iter_mut().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(f as u64 + 1)));
                for vids in &by_class {
                    let class_frames: usize = vids.iter().map(|v| v.1).sum();
                    let target = val_fraction * class_frames as f64;
                    let mut shuffled = vids.clone();
                    shuffled.shuffle(&mut rng);
                    let mut total = 0usize;
                    let mut taken = 0usize;
                    for (vid, frames) in shuffled {
                        // Keep at least one video of the class for training.
                        if taken + 1 == vids.len() {
                            break;
                        }
                        let before = (total as f64 - target).abs();
                        let after = ((total + frames) as f64 - target).abs();
                        if taken == 0 || after < before {
                            total += frames;
                            taken += 1;
                            fold.insert(vid);
                        }
                    }
                }
            }
        }
    }
    let plans: Vec<SplitPlan> = folds
        .into_iter()
        .enumerate()
        .map(|(i, vids)| plan_from_validation(manifest, i, vids))
        .collect();
    for plan in &plans {
        for label in [NON_NEOPLASTIC, NEOPLASTIC] {
            if !plan
                .validation_record_ids
                .iter()
                .any(|&i| manifest.records[i].label == Some(label))
            {
                return Err(Error::Stratification(format!(
                    "fold {} has no class-{label} validation frames",
                    plan.fold_index
                )));
            }
        }
    }
    Ok(plans)
}

/// Class-stratified, nested selection of `k_percent` of the labeled frames
/// in `pool`. The overall count is `round_half_up(k·N)`, apportioned across
/// classes by largest remainder. Each class is ranked once by a seeded
/// shuffle and the selection takes a prefix, so smaller `k` always yields a
/// subset of larger `k` for the same seed.
pub fn select_labeled_fraction(
    manifest: &DatasetManifest,
    pool: &BTreeSet<usize>,
    k_percent: f64,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "k must lie in (0, 100], got {k_percent}"
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in pool {
        match manifest.records[i].label {
            Some(l) => by_class[l as usize].push(i),
            None => {
                return Err(Error::Selection(format!("record {i} is unlabeled")));
            }
        }
    }
    if k_percent == 100.0 {
        return Ok(pool.clone());
    }
    let total = round_half_up(k_percent / 100.0 * pool.len() as f64);
    let counts = apportion(total, &[by_class[0].len(), by_class[1].len()]);
    let mut out = BTreeSet::new();
    for (label, ids) in by_class.iter_mut().enumerate() {
        if !ids.is_empty() && counts[label] == 0 {
            return Err(Error::Selection(format!(
                "class {label} has no frames left at k = {k_percent}%"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(label as u64 * 7919));
        ids.shuffle(&mut rng);
        out.extend(ids.iter().take(counts[label]));
    }
    Ok(out)
}

/// Inverse class frequencies from per-class counts, indexed by label.
pub fn class_weights_from_counts(counts: [usize; 2]) -> Result<[f64; 2]> {
    let total = (counts[0] + counts[1]) as f64;
    if counts.contains(&0) {
        return Err(Error::DegenerateWeights(format!(
            "class counts {counts:?} leave a class empty"
        )));
    }
    Ok([total / counts[0] as f64, total / counts[1] as f64])
}

/// `w_c = 1 / freq(c)` over the labeled frames in `ids`, indexed by label.
pub fn class_weights(manifest: &DatasetManifest, ids: &BTreeSet<usize>) -> Result<[f64; 2]> {
    let mut counts = [0usize; 2];
    for &i in ids {
        if let Some(l) = manifest.records[i].label {
            counts[l as usize] += 1;
        }
    }
    class_weights_from_counts(counts)
}

/// Loads every image referenced by `ids` into memory.
pub fn load_images(
    manifest: &DatasetManifest,
    ids: impl IntoIterator<Item = usize>,
) -> Result<HashMap<usize, Tensor>> {
    ids.into_iter()
        .map(|i| Ok((i, imaging::load_rgb(manifest.resolve(i))?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub frames_per_video: usize,
    pub image_side: usize,
    /// Fraction of videos whose frames carry labels.
    pub label_fraction: f64,
    /// Fraction of videos showing the neoplastic (lobulated) lesion type.
    pub positive_fraction: f64,
    /// Fraction of videos rendered in the shifted modality.
    pub nbi_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            videos: 40,
            frames_per_video: 50,
            image_side: 40,
            label_fraction: 0.6,
            positive_fraction: 0.7,
            nbi_fraction: 0.4,
            seed: 0,
        }
    }
}

/// Per-video lesion appearance; frames jitter around it.
#[derive(Clone, Debug)]
struct LesionStyle {
    class: u8,
    radius: f64,
    lobes: usize,
    lobe_amplitude: f64,
    harmonic_amplitude: f64,
    eccentricity: f64,
    phase: f64,
    phase2: f64,
    tissue: [f64; 3],
    lesion_delta: [f64; 3],
    dome: f64,
}

impl LesionStyle {
    fn sample(class: u8, side: f64, rng: &mut ChaCha8Rng) -> Self {
        let (lobes, lobe_amplitude, harmonic_amplitude) = if class == NEOPLASTIC {
            (
                rng.gen_range(5..=7),
                rng.gen_range(0.14..0.24),
                rng.gen_range(0.0..0.06),
            )
        } else {
            (0, 0.0, 0.0)
        };
        Self {
            class,
            radius: side * rng.gen_range(0.27..0.34),
            lobes,
            lobe_amplitude,
            harmonic_amplitude,
            eccentricity: rng.gen_range(0.0..0.16),
            phase: rng.gen_range(0.0..2.0 * PI),
            phase2: rng.gen_range(0.0..2.0 * PI),
            tissue: [
                rng.gen_range(0.70..0.88),
                rng.gen_range(0.32..0.48),
                rng.gen_range(0.28..0.42),
            ],
            lesion_delta: [
                rng.gen_range(0.04..0.12),
                rng.gen_range(0.10..0.20),
                rng.gen_range(0.02..0.10),
            ],
            dome: rng.gen_range(0.05..0.15),
        }
    }

    fn contour(&self, theta: f64) -> f64 {
        let mut r = 1.0 + self.eccentricity * (2.0 * (theta - self.phase2)).cos();
        if self.class == NEOPLASTIC {
            r += self.lobe_amplitude * (self.lobes as f64 * theta + self.phase).cos()
                + self.harmonic_amplitude
                    * ((2 * self.lobes + 1) as f64 * theta + 2.0 * self.phase).cos();
        }
        self.radius * r
    }
}

/// Emulated narrow-band imaging: a fixed linear remap of the RGB channels.
pub fn nbi_remap(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    [
        (0.15 * r + 0.55 * g).clamp(0.0, 1.0),
        (0.35 * b + 0.45 * g + 0.05).clamp(0.0, 1.0),
        (0.70 * b + 0.30 * r - 0.05).clamp(0.0, 1.0),
    ]
}

fn render_frame(style: &LesionStyle, modality: Modality, side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = side as f64;
    let cy = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let cx = s / 2.0 + rng.gen_range(-0.06..0.06) * s;
    let rotation = rng.gen_range(-0.35..0.35);
    let scale = rng.gen_range(0.93..1.07);
    let brightness = rng.gen_range(0.94..1.06);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(0.15..0.35) * s,
                rng.gen_range(-0.08..0.08),
            )
        })
        .collect();
    let mut t = Tensor::zeros(3, side, side);
    for y in 0..side {
        for x in 0..side {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let (dy, dx) = (py - cy, px - cx);
            let dist = (dy * dy + dx * dx).sqrt();
            let theta = dy.atan2(dx) - rotation;
            let edge = style.contour(theta) * scale;
            // Soft one-pixel boundary.
            let inside = (0.5 - (dist - edge)).clamp(0.0, 1.0);
            let dome = if edge > 0.0 {
                style.dome * (1.0 - (dist / edge).min(1.0).powi(2))
            } else {
                0.0
            };
            let rel = ((py - s / 2.0).powi(2) + (px - s / 2.0).powi(2)).sqrt() / (s / 2.0);
            let vignette = 1.0 - 0.2 * rel.powi(2);
            let shade: f64 = blobs
                .iter()
                .map(|&(by, bx, w, a)| a * (-((py - by).powi(2) + (px - bx).powi(2)) / (w * w)).exp())
                .sum();
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let base = style.tissue[c] + inside * (style.lesion_delta[c] + dome);
                rgb[c] = (base + shade) * vignette * brightness;
            }
            if modality == Modality::Nbi {
                rgb = nbi_remap(rgb);
            }
            for (c, v) in rgb.iter().enumerate() {
                t.set(c, y, x, (v + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    t
}

/// Renders a synthetic two-class, two-modality dataset under `out_dir`
/// (`images/*.png` plus `manifest.csv`) and returns its manifest.
///
/// Neoplastic lesions have a lobulated outline, non-neoplastic ones a smooth
/// elliptical outline; colour, size, lighting and noise vary independently
/// of class. Each video is one lesion filmed over several jittered frames.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if spec.videos == 0 || spec.frames_per_video == 0 || spec.image_side == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be >= 1".into()));
    }
    for (name, f) in [
        ("label_fraction", spec.label_fraction),
        ("positive_fraction", spec.positive_fraction),
        ("nbi_fraction", spec.nbi_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1]")));
        }
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("images"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..spec.videos).collect();
    order.shuffle(&mut rng);
    let n_pos = round_half_up(spec.positive_fraction * spec.videos as f64).min(spec.videos);
    let mut class = vec![NON_NEOPLASTIC; spec.videos];
    for &v in &order[..n_pos] {
        class[v] = NEOPLASTIC;
    }
    // Modality and labeled status are assigned within each class so every
    // (class, modality, labeled) combination is populated when sizes allow.
    let mut modality = vec![Modality::Wli; spec.videos];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for c in [NEOPLASTIC, NON_NEOPLASTIC] {
        let mut members: Vec<usize> = order.iter().copied().filter(|&v| class[v] == c).collect();
        members.shuffle(&mut rng);
        let n_nbi = round_half_up(spec.nbi_fraction * members.len() as f64);
        for &v in &members[..n_nbi] {
            modality[v] = Modality::Nbi;
        }
        groups.push(members[..n_nbi].to_vec());
        groups.push(members[n_nbi..].to_vec());
    }
    let total_labeled = round_half_up(spec.label_fraction * spec.videos as f64).min(spec.videos);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let per_group = apportion(total_labeled, &sizes);
    let mut labeled = vec![false; spec.videos];
    for (g, members) in groups.iter().enumerate() {
        for &v in &members[..per_group[g]] {
            labeled[v] = true;
        }
    }

    let styles: Vec<LesionStyle> = (0..spec.videos)
        .map(|v| LesionStyle::sample(class[v], spec.image_side as f64, &mut rng))
        .collect();
    let mut records = Vec::with_capacity(spec.videos * spec.frames_per_video);
    for v in 0..spec.videos {
        let video_id = format!("v{v:04}");
        for f in 0..spec.frames_per_video {
            let mut frame_rng = ChaCha8Rng::seed_from_u64(
                spec.seed.wrapping_mul(1_000_003) ^ ((v as u64) << 20 | f as u64),
            );
            let img = render_frame(&styles[v], modality[v], spec.image_side, &mut frame_rng);
            let rel = PathBuf::from(format!("images/{video_id}_f{f:04}.png"));
            imaging::save_png(&img, out_dir.join(&rel))?;
            records.push(SampleRecord {
                image_path: rel,
                video_id: video_id.clone(),
                label: labeled[v].then_some(class[v]),
                modality: modality[v],
            });
        }
    }
    let manifest = DatasetManifest::new(records, out_dir)?;
    manifest.save(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn record(path: &str, video: &str, label: Option<u8>, m: Modality) -> SampleRecord {
        SampleRecord {
            image_path: path.into(),
            video_id: video.into(),
            label,
            modality: m,
        }
    }

    /// `videos` labeled videos per class with `frames` frames each, plus one
    /// unlabeled video.
    fn toy_manifest(videos: usize, frames: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for c in 0..2u8 {
            for v in 0..videos {
                for f in 0..frames {
                    records.push(record(
                        &format!("c{c}v{v}f{f}.png"),
                        &format!("c{c}v{v}"),
                        Some(c),
                        Modality::Wli,
                    ));
                }
            }
        }
        for f in 0..frames {
            records.push(record(&format!("u{f}.png"), "u", None, Modality::Nbi));
        }
        DatasetManifest::new(records, ".").unwrap()
    }

    #[test]
    fn parses_and_rejects() {
        let p = Path::new("m.csv");
        let ok = "image_path,video_id,label,modality\na.png,v1,1,WLI\nb.png,v1,,NBI\n";
        let m = parse_manifest(ok, p, ".".into()).unwrap();
        assert_eq!((m.num_labeled(), m.num_unlabeled()), (1, 1));
        assert_eq!(m.to_csv(), ok);

        assert!(matches!(parse_manifest("", p, ".".into()), Err(Error::EmptyManifest(_))));
        assert!(matches!(
            parse_manifest("image_path,video_id,label,modality\n", p, ".".into()),
            Err(Error::EmptyManifest(_))
        ));
        let bad_label = "image_path,video_id,label,modality\na.png,v1,2,WLI\n";
        assert!(matches!(
            parse_manifest(bad_label, p, ".".into()),
            Err(Error::Parse { line: 2, .. })
        ));
        let bad_mod = "image_path,video_id,label,modality\na.png,v1,1,WLI\nb.png,v2,0,XRAY\n";
        assert!(matches!(
            parse_manifest(bad_mod, p, ".".into()),
            Err(Error::Parse { line: 3, .. })
        ));
        let dup = "image_path,video_id,label,modality\na.png,v1,1,WLI\na.png,v2,0,WLI\n";
        assert!(parse_manifest(dup, p, ".".into()).is_err());
        let clash = "image_path,video_id,label,modality\na.png,v1,1,WLI\nb.png,v1,0,WLI\n";
        assert!(matches!(
            parse_manifest(clash, p, ".".into()),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn full_scale_totals() {
        // clinical dataset: 4,095 labeled (3,369 / 726) and 2,554 unlabeled;
        // 3,855 WLI and 2,646 NBI frames.
        let mut records = Vec::new();
        let mut push = |n: usize, label: Option<u8>, modality: Modality, tag: &str| {
            for i in 0..n {
                records.push(record(&format!("{tag}{i}.png"), &format!("{tag}{}", i / 30), label, modality));
            }
        };
        push(2_000, Some(1), Modality::Wli, "pw");
        push(1_369, Some(1), Modality::Nbi, "pn");
        push(400, Some(0), Modality::Wli, "nw");
        push(326, Some(0), Modality::Nbi, "nn");
        push(1_455, None, Modality::Wli, "uw");
        push(951, None, Modality::Nbi, "un");
        push(148, None, Modality::Nbi, "ux");
        let m = DatasetManifest::new(records, ".").unwrap();
        assert_eq!(m.len(), 6_649);
        assert_eq!(m.num_labeled(), 4_095);
        assert_eq!(m.num_unlabeled(), 2_554);
        assert_eq!(m.count_label(NEOPLASTIC), 3_369);
        assert_eq!(m.count_label(NON_NEOPLASTIC), 726);
        assert_eq!(m.count_modality(Modality::Wli), 3_855);
        assert_eq!(m.count_modality(Modality::Nbi), 2_794);
    }

    #[test]
    fn full_scale_validation_size() {
        // 110 neoplastic and 22 non-neoplastic labeled videos, 3,369 and 726
        // frames; a 20 % split averages about 819 frames.
        let mut records = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (label, videos, frames) in [(1u8, 110usize, 3_369usize), (0, 22, 726)] {
            let mut sizes = vec![frames / videos; videos];
            for s in sizes.iter_mut().take(frames % videos) {
                *s += 1;
            }
            // Perturb sizes while keeping the class total.
            for _ in 0..videos {
                let (a, b) = (rng.gen_range(0..videos), rng.gen_range(0..videos));
                let d = rng.gen_range(0..=sizes[a] / 2);
                sizes[a] -= d;
                sizes[b] += d;
            }
            for (v, &n) in sizes.iter().enumerate() {
                for f in 0..n {
                    records.push(record(
                        &format!("{label}_{v}_{f}.png"),
                        &format!("{label}_{v}"),
                        Some(label),
                        Modality::Wli,
                    ));
                }
            }
        }
        let m = DatasetManifest::new(records, ".").unwrap();
        assert_eq!(m.num_labeled(), 4_095);
        let folds = make_folds(&m, 5, 0.2, 0, FoldStrategy::IndependentRedraw).unwrap();
        let mean = folds.iter().map(|f| f.validation_record_ids.len()).sum::<usize>() as f64 / 5.0;
        assert!((mean - 819.0).abs() <= 819.0 * 0.05, "mean validation size {mean}");
    }

    #[test]
    fn rotation_partitions_videos() {
        let m = toy_manifest(5, 3);
        let folds = make_folds(&m, 5, 0.2, 1, FoldStrategy::Rotation).unwrap();
        let mut seen = BTreeMap::new();
        for f in &folds {
            for v in &f.validation_video_ids {
                *seen.entry(v.clone()).or_insert(0) += 1;
            }
        }
        assert_eq!(seen.len(), 10);
        assert!(seen.values().all(|&c| c == 1));
    }

    #[test]
    fn folds_are_pure_and_deterministic() {
        let m = toy_manifest(8, 4);
        for strategy in [FoldStrategy::IndependentRedraw, FoldStrategy::Rotation] {
            let a = make_folds(&m, 5, 0.2, 3, strategy).unwrap();
            assert_eq!(a, make_folds(&m, 5, 0.2, 3, strategy).unwrap());
            for plan in &a {
                for &i in &plan.unsupervised_record_ids {
                    assert!(!plan.validation_video_ids.contains(&m.records[i].video_id));
                }
                assert!(plan.validation_record_ids.iter().all(|&i| m.records[i].is_labeled()));
            }
        }
    }

    #[test]
    fn too_few_videos_is_a_stratification_error() {
        let m = toy_manifest(3, 2);
        assert!(matches!(
            make_folds(&m, 5, 0.2, 0, FoldStrategy::IndependentRedraw),
            Err(Error::Stratification(_))
        ));
    }

    fn labeled_pool(pos: usize, neg: usize) -> (DatasetManifest, BTreeSet<usize>) {
        let mut records = Vec::new();
        for i in 0..pos {
            records.push(record(&format!("p{i}"), &format!("p{}", i / 10), Some(1), Modality::Wli));
        }
        for i in 0..neg {
            records.push(record(&format!("n{i}"), &format!("n{}", i / 10), Some(0), Modality::Wli));
        }
        let m = DatasetManifest::new(records, ".").unwrap();
        let ids = (0..m.len()).collect();
        (m, ids)
    }

    #[test]
    fn stratified_counts() {
        let (m, pool) = labeled_pool(830, 170);
        let sel = select_labeled_fraction(&m, &pool, 25.0, 9).unwrap();
        let pos = sel.iter().filter(|&&i| m.label(i) == Some(1)).count();
        assert_eq!((pos, sel.len() - pos), (208, 42));
        assert_eq!(select_labeled_fraction(&m, &pool, 100.0, 9).unwrap(), pool);
    }

    #[test]
    fn selection_fails_when_a_class_empties() {
        let (m, pool) = labeled_pool(200, 2);
        assert!(matches!(
            select_labeled_fraction(&m, &pool, 6.25, 0),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights_from_counts([17, 83]).unwrap();
        assert!((w[1] - 1.0 / 0.83).abs() < 1e-12 && (w[0] - 1.0 / 0.17).abs() < 1e-12);
        assert!((w[1] - 1.2048).abs() < 1e-4 && (w[0] - 5.8824).abs() < 1e-4);
        assert_eq!(class_weights_from_counts([5, 5]).unwrap(), [2.0, 2.0]);
        let w = class_weights_from_counts([1, 9]).unwrap();
        assert!((w[1] - 1.0 / 0.9).abs() < 1e-12 && (w[0] - 10.0).abs() < 1e-12);
        assert!(matches!(
            class_weights_from_counts([0, 4]),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn synthetic_generation_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            videos: 20,
            frames_per_video: 50,
            image_side: 12,
            label_fraction: 0.6,
            ..Default::default()
        };
        let m = generate_synthetic_dataset(&spec, dir.path()).unwrap();
        assert_eq!(m.len(), 1_000);
        let vids: BTreeSet<_> = m.records.iter().map(|r| r.video_id.clone()).collect();
        assert_eq!(vids.len(), 20);
        assert_eq!((m.num_labeled(), m.num_unlabeled()), (600, 400));
        let reloaded = load_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(reloaded.records, m.records);

        let dir2 = tempfile::tempdir().unwrap();
        let small = SyntheticSpec {
            videos: 4,
            frames_per_video: 3,
            image_side: 16,
            ..spec
        };
        let a = generate_synthetic_dataset(&small, dir2.path().join("a")).unwrap();
        generate_synthetic_dataset(&small, dir2.path().join("b")).unwrap();
        for r in &a.records {
            let x = fs::read(dir2.path().join("a").join(&r.image_path)).unwrap();
            let y = fs::read(dir2.path().join("b").join(&r.image_path)).unwrap();
            assert_eq!(x, y);
        }
    }

    proptest! {
        #[test]
        fn selection_is_nested(pos in 20usize..300, neg in 20usize..120, seed in 0u64..50) {
            let (m, pool) = labeled_pool(pos, neg);
            let mut prev: Option<BTreeSet<usize>> = None;
            for k in [6.25, 12.5, 25.0, 50.0, 100.0] {
                let sel = select_labeled_fraction(&m, &pool, k, seed).unwrap();
                if let Some(p) = &prev {
                    prop_assert!(p.is_subset(&sel));
                }
                prev = Some(sel);
            }
        }

        #[test]
        fn apportion_sums_to_total(total in 0usize..500, a in 0usize..400, b in 1usize..400) {
            prop_assert_eq!(apportion(total, &[a, b]).iter().sum::<usize>(), total);
        }
    }
}
