//! Config-driven experiment protocols and their reports.
//!
//! * **fraction sweep**: for every fold and labeled fraction `k`, a
//!   baseline (no jigsaw head) and an SSL model train on the same `D_K`
//!   and are scored on the same validation videos; medians and standard
//!   deviations are taken across folds.
//! * **domain adaptation**: both arms learn from labeled source-modality
//!   frames, the SSL arm also solves puzzles on unlabeled target frames;
//!   both are tested on labeled target frames, averaged over seeds.
//! * **OOD**: a model trained on the source modality scores held-out
//!   source frames against target frames; AUROC medians over seeds.
//!
//! Independent cells may run on several worker threads. Results are
//! collected in cell order, so reports do not depend on the worker count.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetManifest, FoldStrategy, Modality, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{EvaluationReport, RocPoint};
use crate::model::{build_baseline_model, build_model, DualHeadModel, InitMode};
use crate::ood::{self, OodConfig, OodMode};
use crate::permset::{generate_permutation_set, PermutationSet};
use crate::plot::{self, Series};
use crate::tensor::Tensor;
use crate::training::{self, Arm, TrainConfig, TrainingSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    FractionSweep,
    DomainAdaptation,
    Ood,
}

/// Starting hyperparameters before `[train]` / `[baseline]` / `[ssl]`
/// overrides are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Per-fraction learning rates, weight decays, `P` and `λ`.
    #[default]
    Clinical,
    /// [`TrainConfig::default`] for every fraction and arm.
    Default,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub manifest: PathBuf,
    pub k_percents: Vec<f64>,
    pub n_folds: usize,
    pub val_fraction: f64,
    pub fold_strategy: FoldStrategy,
    /// Draw `D_K` so that smaller fractions are subsets of larger ones
    /// within a fold; otherwise each fraction is drawn independently.
    pub nested_fractions: bool,
    /// Base seed for splits; fold `i` trains with `seed + i`.
    pub seed: u64,
    /// Training seeds for the domain-adaptation and OOD protocols.
    pub seeds: Vec<u64>,
    pub preset: Preset,
    pub output_dir: PathBuf,
    pub source_modality: Modality,
    pub target_modality: Modality,
    /// Fraction of labeled source frames (by video) held out as the
    /// in-distribution test set of the OOD protocol.
    pub ood_holdout_fraction: f64,
    /// Also train a model without a jigsaw head and report its KL-only
    /// AUROC.
    pub ood_train_baseline: bool,
    pub ood: OodConfig,
    /// Encoder weights to start from instead of random initialization.
    pub pretrained: Option<PathBuf>,
    pub workers: usize,
    /// Overrides applied to both arms (flat `TrainConfig` keys).
    pub train: toml::Table,
    pub baseline: toml::Table,
    pub ssl: toml::Table,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::FractionSweep,
            manifest: PathBuf::from("manifest.csv"),
            k_percents: dataset::K_PERCENTS.to_vec(),
            n_folds: 5,
            val_fraction: 0.2,
            fold_strategy: FoldStrategy::IndependentRedraw,
            nested_fractions: true,
            seed: 0,
            seeds: vec![0, 1, 2],
            preset: Preset::Clinical,
            output_dir: PathBuf::from("out"),
            source_modality: Modality::Wli,
            target_modality: Modality::Nbi,
            ood_holdout_fraction: 0.2,
            ood_train_baseline: true,
            ood: OodConfig::default(),
            pretrained: None,
            workers: 1,
            train: toml::Table::new(),
            baseline: toml::Table::new(),
            ssl: toml::Table::new(),
        }
    }
}

fn canonical_key(key: &str) -> &str {
    match key {
        "s" => "scramble_fraction",
        "P" => "permutations",
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a relative `manifest` path is resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        if cfg.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.manifest = dir.join(&cfg.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_percents.iter().any(|&k| !(k > 0.0 && k <= 100.0)) {
            return Err(Error::Config(format!("k values {:?} outside (0, 100]", self.k_percents)));
        }
        if self.protocol != Protocol::FractionSweep && self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.protocol == Protocol::FractionSweep && self.n_folds == 0 {
            return Err(Error::Config("n_folds must be positive".into()));
        }
        if self.source_modality == self.target_modality && self.protocol != Protocol::FractionSweep {
            return Err(Error::Config("source and target modality must differ".into()));
        }
        for arm in [Arm::Baseline, Arm::Ssl] {
            self.arm_config(arm, 100.0, 0)?;
        }
        Ok(())
    }

    /// Hyperparameters for one arm at one fraction: preset, then the shared
    /// overrides, then the arm's own overrides.
    pub fn arm_config(&self, arm: Arm, k_percent: f64, seed: u64) -> Result<TrainConfig> {
        let mut base = match self.preset {
            Preset::Clinical => TrainConfig::preset(arm, k_percent)?,
            Preset::Default => TrainConfig::default(),
        };
        base.k_percent = k_percent;
        base.seed = seed;
        base.validate_each_epoch = false;
        let mut table = match toml::Value::try_from(&base) {
            Ok(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config("train config is not a table".into())),
        };
        let own = match arm {
            Arm::Baseline => &self.baseline,
            Arm::Ssl => &self.ssl,
        };
        for overrides in [&self.train, own] {
            for (k, v) in overrides {
                table.insert(canonical_key(k).to_string(), v.clone());
            }
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn init_mode(&self) -> InitMode {
        self.pretrained
            .clone()
            .map_or(InitMode::Random, InitMode::Pretrained)
    }
}

/// How per-cell metrics are summarized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    Median,
    Mean,
}

impl Aggregate {
    fn name(self) -> &'static str {
        match self {
            Aggregate::Median => "median",
            Aggregate::Mean => "mean",
        }
    }

    fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        Some(match self {
            Aggregate::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregate::Median => median(values),
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub k_percent: f64,
    pub fold: usize,
    pub seed: u64,
    pub arm: Arm,
    /// The metrics, or why the cell failed.
    pub outcome: std::result::Result<EvaluationReport, String>,
}

pub const METRICS: [&str; 5] = ["accuracy", "f1", "sensitivity", "specificity", "precision"];
const METRIC_TITLES: [&str; 5] = ["Accuracy (%)", "F1 Score", "Sensitivity", "Specificity", "Precision"];

fn metric_values(r: &EvaluationReport) -> [Option<f64>; 5] {
    [Some(r.accuracy), r.f1, r.sensitivity, r.specificity, r.precision]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub k_percent: f64,
    pub arm: Arm,
    pub runs: usize,
    pub failed: usize,
    /// `(center, std)` per entry of [`METRICS`].
    pub stats: [(Option<f64>, Option<f64>); 5],
}

/// Per-cell results for the sweep and domain-adaptation protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub protocol: Protocol,
    pub aggregate: Aggregate,
    pub cells: Vec<CellResult>,
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl SweepReport {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }

    /// One row per `(k, arm)`, `k` ascending, baseline before SSL.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(f64, Arm)> = self.cells.iter().map(|c| (c.k_percent, c.arm)).collect();
        keys.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        keys.dedup();
        keys.into_iter()
            .map(|(k, arm)| {
                let cells: Vec<&CellResult> = self
                    .cells
                    .iter()
                    .filter(|c| c.k_percent == k && c.arm == arm)
                    .collect();
                let ok: Vec<&EvaluationReport> =
                    cells.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
                let mut stats = [(None, None); 5];
                for (m, slot) in stats.iter_mut().enumerate() {
                    let vals: Vec<f64> = ok.iter().filter_map(|r| metric_values(r)[m]).collect();
                    *slot = (
                        self.aggregate.apply(&vals),
                        (!vals.is_empty()).then(|| std_dev(&vals)),
                    );
                }
                SummaryRow {
                    k_percent: k,
                    arm,
                    runs: ok.len(),
                    failed: cells.len() - ok.len(),
                    stats,
                }
            })
            .collect()
    }

    pub fn summary_for(&self, k_percent: f64, arm: Arm) -> Option<SummaryRow> {
        self.summary()
            .into_iter()
            .find(|r| r.k_percent == k_percent && r.arm == arm)
    }

    /// Aggregated table: one row per `(k, arm)` with center and std columns.
    pub fn summary_csv(&self) -> String {
        let center = self.aggregate.name();
        let mut out = String::from("k_percent,arm,runs,failed");
        for m in METRICS {
            let _ = write!(out, ",{m}_{center},{m}_std");
        }
        out.push('\n');
        for row in self.summary() {
            let _ = write!(out, "{},{},{},{}", row.k_percent, row.arm.name(), row.runs, row.failed);
            for (c, s) in row.stats {
                let _ = write!(out, ",{},{}", fmt_cell(c), fmt_cell(s));
            }
            out.push('\n');
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        let mut out = String::from("k_percent,fold,seed,arm,status");
        for m in METRICS {
            let _ = write!(out, ",{m}");
        }
        out.push_str(",auroc,error\n");
        for c in &self.cells {
            let _ = write!(out, "{},{},{},{}", c.k_percent, c.fold, c.seed, c.arm.name());
            match &c.outcome {
                Ok(r) => {
                    out.push_str(",ok");
                    for v in metric_values(r) {
                        let _ = write!(out, ",{}", fmt_cell(v));
                    }
                    let _ = writeln!(out, ",{},", fmt_cell(r.auroc));
                }
                Err(e) => {
                    out.push_str(",failed,,,,,,");
                    let _ = writeln!(out, ",\"{}\"", e.replace('"', "'"));
                }
            }
        }
        out
    }

    /// Fraction sweeps use one row per `k` with Baseline/SSL column pairs;
    /// domain adaptation uses one row per arm.
    pub fn markdown(&self) -> String {
        let rows = self.summary();
        let fmt = |m: usize, v: Option<f64>| match (m, v) {
            (_, None) => "n/a".to_string(),
            (0, Some(v)) => format!("{:.2}", v * 100.0),
            (_, Some(v)) => format!("{v:.2}"),
        };
        let mut out = String::new();
        match self.protocol {
            Protocol::DomainAdaptation => {
                out.push_str("| | Accuracy | F1 Score | Sensitivity | Specificity | Precision |\n");
                out.push_str("|---|---:|---:|---:|---:|---:|\n");
                for row in &rows {
                    let name = match row.arm {
                        Arm::Baseline => "Baseline",
                        Arm::Ssl => "SSL",
                    };
                    let _ = write!(out, "| {name} |");
                    for (m, (c, _)) in row.stats.iter().enumerate() {
                        let cell = fmt(m, *c);
                        let suffix = if m == 0 && c.is_some() { "%" } else { "" };
                        let _ = write!(out, " {cell}{suffix} |");
                    }
                    out.push('\n');
                }
            }
            _ => {
                out.push_str("| Labeled Data |");
                for t in METRIC_TITLES {
                    let _ = write!(out, " {t} Baseline | {t} SSL |");
                }
                out.push('\n');
                out.push_str("|---|");
                out.push_str(&"---:|".repeat(10));
                out.push('\n');
                let mut ks: Vec<f64> = rows.iter().map(|r| r.k_percent).collect();
                ks.dedup();
                for k in ks {
                    let _ = write!(out, "| {k}% |");
                    let get = |arm| rows.iter().find(|r| r.k_percent == k && r.arm == arm);
                    for m in 0..5 {
                        for arm in [Arm::Baseline, Arm::Ssl] {
                            let v = get(arm).and_then(|r| r.stats[m].0);
                            let _ = write!(out, " {} |", fmt(m, v));
                        }
                    }
                    out.push('\n');
                }
            }
        }
        let failed = self.failed_cells();
        if failed > 0 {
            let _ = writeln!(out, "\n{failed} of {} cells failed.", self.cells.len());
        }
        out
    }

    /// One chart per metric: center ± std against `k` for both arms.
    pub fn plots(&self) -> Vec<(String, String)> {
        let rows = self.summary();
        METRICS
            .iter()
            .enumerate()
            .map(|(m, name)| {
                let series: Vec<Series> = [Arm::Baseline, Arm::Ssl]
                    .iter()
                    .enumerate()
                    .map(|(i, &arm)| Series {
                        name: match arm {
                            Arm::Baseline => "Baseline".into(),
                            Arm::Ssl => "SSL".into(),
                        },
                        color: plot::PALETTE[i].into(),
                        points: rows
                            .iter()
                            .filter(|r| r.arm == arm)
                            .filter_map(|r| match r.stats[m] {
                                (Some(c), s) => Some((r.k_percent, c, s.unwrap_or(0.0))),
                                _ => None,
                            })
                            .collect(),
                    })
                    .collect();
                let title = format!("{} vs labeled data", METRIC_TITLES[m].trim_end_matches(" (%)"));
                (
                    format!("plot_{name}.svg"),
                    plot::line_chart(&title, "Labeled data (%)", METRIC_TITLES[m].trim_end_matches(" (%)"), &series),
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRunResult {
    /// AUROC of κ (KL plus jigsaw term) on the SSL model.
    pub ssl_auroc: f64,
    /// AUROC of the KL term alone on the same SSL model.
    pub kl_auroc: f64,
    /// AUROC of the KL term on a separately trained model without a jigsaw
    /// head, when requested.
    pub baseline_model_auroc: Option<f64>,
    pub ssl_roc: Vec<RocPoint>,
    pub kl_roc: Vec<RocPoint>,
    pub in_count: usize,
    pub out_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRun {
    pub seed: u64,
    pub outcome: std::result::Result<OodRunResult, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub runs: Vec<OodRun>,
}

impl OodReport {
    fn ok_runs(&self) -> Vec<&OodRunResult> {
        self.runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect()
    }

    pub fn failed_runs(&self) -> usize {
        self.runs.len() - self.ok_runs().len()
    }

    pub fn median_ssl_auroc(&self) -> Option<f64> {
        Aggregate::Median.apply(&self.ok_runs().iter().map(|r| r.ssl_auroc).collect::<Vec<_>>())
    }

    pub fn median_kl_auroc(&self) -> Option<f64> {
        Aggregate::Median.apply(&self.ok_runs().iter().map(|r| r.kl_auroc).collect::<Vec<_>>())
    }

    pub fn median_baseline_model_auroc(&self) -> Option<f64> {
        Aggregate::Median.apply(
            &self
                .ok_runs()
                .iter()
                .filter_map(|r| r.baseline_model_auroc)
                .collect::<Vec<_>>(),
        )
    }

    /// The run whose SSL AUROC is the (lower) median; its curves are drawn.
    pub fn median_run(&self) -> Option<&OodRunResult> {
        let mut ok = self.ok_runs();
        ok.sort_by(|a, b| a.ssl_auroc.partial_cmp(&b.ssl_auroc).unwrap());
        ok.get((ok.len().max(1) - 1) / 2).copied()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("seed,status,ssl_auroc,kl_auroc,baseline_model_auroc,error\n");
        for run in &self.runs {
            match &run.outcome {
                Ok(r) => {
                    let _ = writeln!(
                        out,
                        "{},ok,{},{},{},",
                        run.seed,
                        r.ssl_auroc,
                        r.kl_auroc,
                        fmt_cell(r.baseline_model_auroc)
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{},failed,,,,\"{}\"", run.seed, e.replace('"', "'"));
                }
            }
        }
        out
    }

    pub fn markdown(&self) -> String {
        let n = self.ok_runs().len();
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let mut out = format!("| OOD score | AUROC (median of {n}) |\n|---|---:|\n");
        let _ = writeln!(out, "| SSL: KL + jigsaw (κ) | {} |", fmt(self.median_ssl_auroc()));
        let _ = writeln!(out, "| SSL model: KL only | {} |", fmt(self.median_kl_auroc()));
        if let Some(b) = self.median_baseline_model_auroc() {
            let _ = writeln!(out, "| Baseline: KL only | {b:.2} |");
        }
        if self.failed_runs() > 0 {
            let _ = writeln!(out, "\n{} of {} runs failed.", self.failed_runs(), self.runs.len());
        }
        out
    }

    pub fn roc_plot(&self) -> Option<String> {
        let run = self.median_run()?;
        let xy = |pts: &[RocPoint]| pts.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>();
        Some(plot::roc_chart(
            "OOD detection ROC",
            &[
                (
                    format!("SSL κ (AUROC {:.2})", run.ssl_auroc),
                    plot::PALETTE[1].into(),
                    xy(&run.ssl_roc),
                ),
                (
                    format!("KL only (AUROC {:.2})", run.kl_auroc),
                    plot::PALETTE[0].into(),
                    xy(&run.kl_roc),
                ),
            ],
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentReport {
    Sweep(SweepReport),
    Ood(OodReport),
}

impl ExperimentReport {
    /// Cells or runs that failed; non-zero means a partial result.
    pub fn failures(&self) -> usize {
        match self {
            ExperimentReport::Sweep(r) => r.failed_cells(),
            ExperimentReport::Ood(r) => r.failed_runs(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Plot,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "markdown-table" | "md" => Ok(Self::Markdown),
            "plot" | "svg" => Ok(Self::Plot),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidArgument(format!("unknown report format `{other}`"))),
        }
    }
}

/// File name and content pairs for one format, without touching disk.
pub fn report_files(report: &ExperimentReport, format: ReportFormat) -> Result<Vec<(String, String)>> {
    Ok(match (report, format) {
        (_, ReportFormat::Json) => vec![("report.json".into(), report.to_json()?)],
        (ExperimentReport::Sweep(r), ReportFormat::Csv) => vec![
            ("summary.csv".into(), r.summary_csv()),
            ("cells.csv".into(), r.cells_csv()),
        ],
        (ExperimentReport::Sweep(r), ReportFormat::Markdown) => vec![("table.md".into(), r.markdown())],
        (ExperimentReport::Sweep(r), ReportFormat::Plot) => {
            if r.protocol == Protocol::FractionSweep {
                r.plots()
            } else {
                Vec::new()
            }
        }
        (ExperimentReport::Ood(r), ReportFormat::Csv) => {
            let mut files = vec![("ood_auroc.csv".to_string(), r.csv())];
            if let Some(run) = r.median_run() {
                files.push(("roc_ssl.csv".into(), crate::metrics::roc_csv(&run.ssl_roc)));
                files.push(("roc_kl.csv".into(), crate::metrics::roc_csv(&run.kl_roc)));
            }
            files
        }
        (ExperimentReport::Ood(r), ReportFormat::Markdown) => vec![("table.md".into(), r.markdown())],
        (ExperimentReport::Ood(r), ReportFormat::Plot) => {
            r.roc_plot().map(|svg| ("roc.svg".to_string(), svg)).into_iter().collect()
        }
    })
}

/// Writes one format into `dir` and returns the written paths.
pub fn render_report(report: &ExperimentReport, format: ReportFormat, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    report_files(report, format)?
        .into_iter()
        .map(|(name, content)| {
            let path = dir.join(name);
            std::fs::write(&path, content)?;
            Ok(path)
        })
        .collect()
}

/// Writes every format.
pub fn render_all(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Plot] {
        paths.extend(render_report(report, f, dir.as_ref())?);
    }
    Ok(paths)
}

/// Images for every record of a manifest, keyed by record id.
pub fn load_all_images(manifest: &DatasetManifest) -> Result<HashMap<usize, Tensor>> {
    dataset::load_images(manifest, 0..manifest.len())
}

fn run_parallel<T: Sync, R: Send>(workers: usize, jobs: &[T], f: impl Fn(&T) -> R + Sync) -> Result<Vec<R>> {
    if workers <= 1 {
        return Ok(jobs.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| jobs.par_iter().map(&f).collect()))
}

type PermsetKey = (usize, usize, usize, u64);

fn permset_key(cfg: &TrainConfig) -> PermsetKey {
    (cfg.grid_size, cfg.permutations, cfg.permutation_pool_size, cfg.permutation_seed)
}

fn build_permsets<'a>(configs: impl IntoIterator<Item = &'a TrainConfig>) -> Result<HashMap<PermsetKey, PermutationSet>> {
    let mut sets = HashMap::new();
    for cfg in configs {
        let key = permset_key(cfg);
        if !sets.contains_key(&key) {
            let set = generate_permutation_set(key.0, key.1, key.2, key.3)?;
            sets.insert(key, set);
        }
    }
    Ok(sets)
}

/// Data and settings for one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct CellPlan {
    pub k_percent: f64,
    pub fold: usize,
    pub arm: Arm,
    /// The arm's hyperparameters, or why they could not be built.
    pub config: std::result::Result<TrainConfig, String>,
    pub supervised: BTreeSet<usize>,
    /// Frames that set the iteration count, and the jigsaw inputs of the
    /// SSL arm.
    pub unsupervised: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

/// Builds and trains the model for one arm.
pub fn train_arm(
    arm: Arm,
    config: &TrainConfig,
    init: &InitMode,
    data: &TrainingSet<'_>,
    permset: Option<&PermutationSet>,
) -> Result<DualHeadModel> {
    let mut model = match arm {
        Arm::Baseline => build_baseline_model(config.encoder, init, config.seed)?,
        Arm::Ssl => build_model(config.encoder, config.permutations, init, config.seed)?,
    };
    let permset = if arm == Arm::Ssl { permset } else { None };
    training::train(&mut model, data, permset, config)?;
    Ok(model)
}

fn run_jobs(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    images: &HashMap<usize, Tensor>,
    jobs: &[CellPlan],
) -> Result<Vec<CellResult>> {
    let permsets = build_permsets(
        jobs.iter()
            .filter(|j| j.arm == Arm::Ssl)
            .filter_map(|j| j.config.as_ref().ok()),
    )?;
    let init = cfg.init_mode();
    let results = run_parallel(cfg.workers, jobs, |job| {
        let outcome = job.config.clone().and_then(|tc| {
            let data = TrainingSet {
                manifest,
                images,
                supervised: &job.supervised,
                unsupervised: &job.unsupervised,
                validation: &BTreeSet::new(),
            };
            let permset = permsets.get(&permset_key(&tc));
            let run = || -> Result<EvaluationReport> {
                let model = train_arm(job.arm, &tc, &init, &data, permset)?;
                training::evaluate(&model, manifest, images, &job.test, &tc.augment_config())
            };
            let r = run().map_err(|e| e.to_string());
            match &r {
                Ok(rep) => log::info!(
                    "k={} fold={} {}: accuracy {:.4}",
                    job.k_percent,
                    job.fold,
                    job.arm.name(),
                    rep.accuracy
                ),
                Err(e) => log::warn!("k={} fold={} {} failed: {e}", job.k_percent, job.fold, job.arm.name()),
            }
            r
        });
        CellResult {
            k_percent: job.k_percent,
            fold: job.fold,
            seed: job.config.as_ref().map_or(0, |c| c.seed),
            arm: job.arm,
            outcome,
        }
    })?;
    Ok(results)
}

/// Folds shared by every fraction, so validation videos stay fixed across
/// `k` within a fold.
pub fn sweep_plans(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<Vec<SplitPlan>> {
    dataset::make_folds(manifest, cfg.n_folds, cfg.val_fraction, cfg.seed, cfg.fold_strategy)
}

/// Every `(fold, k, arm)` cell of a sweep, in report order.
pub fn plan_fraction_sweep(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<Vec<CellPlan>> {
    let folds = sweep_plans(cfg, manifest)?;
    let mut cells = Vec::new();
    for fold in &folds {
        let seed = cfg.seed.wrapping_add(fold.fold_index as u64);
        for &k in &cfg.k_percents {
            let selection_seed = if cfg.nested_fractions {
                seed
            } else {
                seed ^ (k * 1e4).round() as u64
            };
            let plan = fold.with_fraction(manifest, k, selection_seed);
            for arm in [Arm::Baseline, Arm::Ssl] {
                let (config, plan) = match &plan {
                    Ok(p) => (cfg.arm_config(arm, k, seed).map_err(|e| e.to_string()), Some(p)),
                    Err(e) => (Err(e.to_string()), None),
                };
                cells.push(CellPlan {
                    k_percent: k,
                    fold: fold.fold_index,
                    arm,
                    config,
                    supervised: plan.map(|p| p.supervised_record_ids.clone()).unwrap_or_default(),
                    unsupervised: plan.map(|p| p.unsupervised_record_ids.clone()).unwrap_or_default(),
                    test: fold.validation_record_ids.clone(),
                });
            }
        }
    }
    Ok(cells)
}

pub fn run_fraction_sweep_on(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    images: &HashMap<usize, Tensor>,
) -> Result<SweepReport> {
    let cells = plan_fraction_sweep(cfg, manifest)?;
    Ok(SweepReport {
        protocol: Protocol::FractionSweep,
        aggregate: Aggregate::Median,
        cells: run_jobs(cfg, manifest, images, &cells)?,
    })
}

pub fn run_fraction_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let manifest = dataset::load_manifest(&cfg.manifest)?;
    let images = load_all_images(&manifest)?;
    run_fraction_sweep_on(cfg, &manifest, &images)
}

/// Record-id sets for domain adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    /// Labeled source frames: the supervised set of both arms.
    pub labeled_source: BTreeSet<usize>,
    /// Labeled source plus unlabeled target: the SSL jigsaw set.
    pub unsupervised: BTreeSet<usize>,
    /// Labeled target frames.
    pub test: BTreeSet<usize>,
}

pub fn domain_split(manifest: &DatasetManifest, source: Modality, target: Modality) -> Result<DomainSplit> {
    let labeled_source = manifest.ids_where(|r| r.modality == source && r.is_labeled());
    let unlabeled_target = manifest.ids_where(|r| r.modality == target && !r.is_labeled());
    let test = manifest.ids_where(|r| r.modality == target && r.is_labeled());
    for (set, what) in [
        (&labeled_source, format!("labeled {source}")),
        (&unlabeled_target, format!("unlabeled {target}")),
        (&test, format!("labeled {target}")),
    ] {
        if set.is_empty() {
            return Err(Error::Consistency(format!("manifest has no {what} frames")));
        }
    }
    let unsupervised: BTreeSet<usize> = labeled_source.union(&unlabeled_target).copied().collect();
    if !unsupervised.is_disjoint(&test) {
        return Err(Error::Consistency("target test frames overlap training frames".into()));
    }
    Ok(DomainSplit {
        labeled_source,
        unsupervised,
        test,
    })
}

pub fn run_domain_adaptation_on(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    images: &HashMap<usize, Tensor>,
) -> Result<SweepReport> {
    let split = domain_split(manifest, cfg.source_modality, cfg.target_modality)?;
    let mut jobs = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        for arm in [Arm::Baseline, Arm::Ssl] {
            jobs.push(CellPlan {
                k_percent: 100.0,
                fold: i,
                arm,
                config: cfg.arm_config(arm, 100.0, seed).map_err(|e| e.to_string()),
                supervised: split.labeled_source.clone(),
                // The baseline never sees these frames; they only fix the
                // iteration count so both arms take the same number of steps.
                unsupervised: split.unsupervised.clone(),
                test: split.test.clone(),
            });
        }
    }
    Ok(SweepReport {
        protocol: Protocol::DomainAdaptation,
        aggregate: Aggregate::Mean,
        cells: run_jobs(cfg, manifest, images, &jobs)?,
    })
}

pub fn run_domain_adaptation(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let manifest = dataset::load_manifest(&cfg.manifest)?;
    let images = load_all_images(&manifest)?;
    run_domain_adaptation_on(cfg, &manifest, &images)
}

/// Record-id sets for the OOD protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct OodSplit {
    /// Labeled source frames outside the held-out videos.
    pub supervised: BTreeSet<usize>,
    /// Every source frame outside the held-out videos.
    pub unsupervised: BTreeSet<usize>,
    /// Held-out labeled source frames (in-distribution, label 0).
    pub in_distribution: BTreeSet<usize>,
    /// Labeled target frames (out-of-distribution, label 1).
    pub out_of_distribution: BTreeSet<usize>,
}

pub fn ood_split(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<OodSplit> {
    let source_ids = manifest.ids_where(|r| r.modality == cfg.source_modality);
    let out_of_distribution = manifest.ids_where(|r| r.modality == cfg.target_modality && r.is_labeled());
    if source_ids.is_empty() || out_of_distribution.is_empty() {
        return Err(Error::Consistency(format!(
            "OOD needs {} frames and labeled {} frames",
            cfg.source_modality, cfg.target_modality
        )));
    }
    // Subset ids are positions in the sorted source id list.
    let source = manifest.subset(&source_ids);
    let back: Vec<usize> = source_ids.iter().copied().collect();
    let plan = dataset::make_folds(&source, 1, cfg.ood_holdout_fraction, cfg.seed, FoldStrategy::IndependentRedraw)?
        .remove(0);
    let map = |ids: &BTreeSet<usize>| ids.iter().map(|&i| back[i]).collect::<BTreeSet<usize>>();
    Ok(OodSplit {
        supervised: map(&plan.supervised_record_ids),
        unsupervised: map(&plan.unsupervised_record_ids),
        in_distribution: map(&plan.validation_record_ids),
        out_of_distribution,
    })
}

fn ood_run(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    images: &HashMap<usize, Tensor>,
    split: &OodSplit,
    seed: u64,
) -> Result<OodRunResult> {
    let init = cfg.init_mode();
    let ssl_cfg = cfg.arm_config(Arm::Ssl, 100.0, seed)?;
    let permset = generate_permutation_set(
        ssl_cfg.grid_size,
        ssl_cfg.permutations,
        ssl_cfg.permutation_pool_size,
        ssl_cfg.permutation_seed,
    )?;
    let empty = BTreeSet::new();
    let data = TrainingSet {
        manifest,
        images,
        supervised: &split.supervised,
        unsupervised: &split.unsupervised,
        validation: &empty,
    };
    let model = train_arm(Arm::Ssl, &ssl_cfg, &init, &data, Some(&permset))?;
    let augment = ssl_cfg.augment_config();
    let prepare = |ids: &BTreeSet<usize>| -> Result<Vec<Tensor>> {
        ids.iter()
            .map(|id| {
                images
                    .get(id)
                    .map(|raw| augment.eval_transform(raw))
                    .ok_or_else(|| Error::InvalidArgument(format!("image for record {id} is not loaded")))
            })
            .collect()
    };
    let inside = prepare(&split.in_distribution)?;
    let outside = prepare(&split.out_of_distribution)?;
    let spec = ssl_cfg.tile_spec();
    let ood_cfg = OodConfig {
        scramble_fraction: ssl_cfg.scramble_fraction,
        ..cfg.ood.clone()
    };
    let kl_cfg = OodConfig {
        mode: OodMode::KlOnly,
        ..ood_cfg.clone()
    };
    let ssl = ood::evaluate_ood(&model, &inside, &outside, Some(&permset), &spec, &ood_cfg, seed)?;
    let kl = ood::evaluate_ood(&model, &inside, &outside, None, &spec, &kl_cfg, seed)?;
    let baseline_model_auroc = if cfg.ood_train_baseline {
        let base_cfg = cfg.arm_config(Arm::Baseline, 100.0, seed)?;
        let base = train_arm(Arm::Baseline, &base_cfg, &init, &data, None)?;
        Some(ood::evaluate_ood(&base, &inside, &outside, None, &spec, &kl_cfg, seed)?.auroc)
    } else {
        None
    };
    log::info!(
        "OOD seed {seed}: κ AUROC {:.4}, KL-only AUROC {:.4}",
        ssl.auroc,
        kl.auroc
    );
    Ok(OodRunResult {
        ssl_auroc: ssl.auroc,
        kl_auroc: kl.auroc,
        baseline_model_auroc,
        ssl_roc: ssl.roc,
        kl_roc: kl.roc,
        in_count: inside.len(),
        out_count: outside.len(),
    })
}

pub fn run_ood_experiment_on(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    images: &HashMap<usize, Tensor>,
) -> Result<OodReport> {
    let split = ood_split(cfg, manifest)?;
    let runs = run_parallel(cfg.workers, &cfg.seeds, |&seed| OodRun {
        seed,
        outcome: ood_run(cfg, manifest, images, &split, seed).map_err(|e| e.to_string()),
    })?;
    Ok(OodReport { runs })
}

pub fn run_ood_experiment(cfg: &ExperimentConfig) -> Result<OodReport> {
    let manifest = dataset::load_manifest(&cfg.manifest)?;
    let images = load_all_images(&manifest)?;
    run_ood_experiment_on(cfg, &manifest, &images)
}

/// Runs whichever protocol the config names.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(match cfg.protocol {
        Protocol::FractionSweep => ExperimentReport::Sweep(run_fraction_sweep(cfg)?),
        Protocol::DomainAdaptation => ExperimentReport::Sweep(run_domain_adaptation(cfg)?),
        Protocol::Ood => ExperimentReport::Ood(run_ood_experiment(cfg)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConfusionCounts;

    fn report(acc: f64) -> EvaluationReport {
        EvaluationReport {
            counts: ConfusionCounts::default(),
            accuracy: acc,
            f1: Some(acc),
            sensitivity: Some(0.5),
            specificity: None,
            precision: Some(0.25),
            auroc: None,
            roc: None,
        }
    }

    fn cell(k: f64, fold: usize, arm: Arm, acc: Option<f64>) -> CellResult {
        CellResult {
            k_percent: k,
            fold,
            seed: fold as u64,
            arm,
            outcome: acc.map(report).ok_or_else(|| "diverged".to_string()),
        }
    }

    fn manifest(videos: usize) -> DatasetManifest {
        use crate::dataset::SampleRecord;
        let records = (0..videos)
            .flat_map(|v| {
                (0..4).map(move |f| SampleRecord {
                    image_path: format!("v{v}_{f}.png").into(),
                    video_id: format!("v{v}"),
                    label: (v % 5 != 4).then_some(u8::from(v % 3 != 0)),
                    modality: if v % 4 == 3 { Modality::Nbi } else { Modality::Wli },
                })
            })
            .collect();
        DatasetManifest::new(records, ".").unwrap()
    }

    #[test]
    fn sweep_cells_are_fair_and_validation_is_constant() {
        let m = manifest(60);
        for nested in [true, false] {
            let cfg = ExperimentConfig {
                k_percents: vec![100.0, 25.0, 6.25],
                n_folds: 3,
                nested_fractions: nested,
                preset: Preset::Default,
                ..Default::default()
            };
            let cells = plan_fraction_sweep(&cfg, &m).unwrap();
            assert_eq!(cells.len(), 3 * 3 * 2);
            for pair in cells.chunks(2) {
                let (b, s) = (&pair[0], &pair[1]);
                assert_eq!((b.arm, s.arm), (Arm::Baseline, Arm::Ssl));
                assert_eq!((b.k_percent, b.fold), (s.k_percent, s.fold));
                assert_eq!(b.supervised, s.supervised);
                assert_eq!(b.test, s.test);
                assert!(b.supervised.is_disjoint(&b.test));
            }
            for fold in 0..3 {
                let tests: BTreeSet<_> = cells.iter().filter(|c| c.fold == fold).map(|c| c.test.clone()).collect();
                assert_eq!(tests.len(), 1);
            }
        }
        let single = ExperimentConfig {
            k_percents: vec![100.0],
            n_folds: 1,
            ..Default::default()
        };
        assert_eq!(plan_fraction_sweep(&single, &m).unwrap().len(), 2);
    }

    #[test]
    fn domain_split_is_disjoint() {
        let m = manifest(60);
        let split = domain_split(&m, Modality::Wli, Modality::Nbi).unwrap();
        assert!(split.unsupervised.is_disjoint(&split.test));
        assert!(split.labeled_source.is_subset(&split.unsupervised));
        assert!(split.test.iter().all(|&i| m.records[i].modality == Modality::Nbi && m.records[i].is_labeled()));
        let wli_only = m.subset(&m.ids_where(|r| r.modality == Modality::Wli));
        assert!(domain_split(&wli_only, Modality::Wli, Modality::Nbi).is_err());
    }

    #[test]
    fn median_and_std() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((std_dev(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = SweepReport {
            protocol: Protocol::FractionSweep,
            aggregate: Aggregate::Median,
            cells: vec![],
        };
        let csv = r.summary_csv();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("k_percent,arm,runs,failed,accuracy_median,accuracy_std"));
    }

    #[test]
    fn summary_rows_per_k_and_arm() {
        let r = SweepReport {
            protocol: Protocol::FractionSweep,
            aggregate: Aggregate::Median,
            cells: vec![
                cell(100.0, 0, Arm::Baseline, Some(0.7)),
                cell(100.0, 0, Arm::Ssl, Some(0.8)),
                cell(6.25, 0, Arm::Baseline, Some(0.5)),
                cell(6.25, 0, Arm::Ssl, Some(0.6)),
                cell(6.25, 1, Arm::Baseline, Some(0.7)),
                cell(6.25, 1, Arm::Ssl, None),
            ],
        };
        let csv = r.summary_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("6.25,baseline,2,0,0.6,"));
        assert!(lines[2].starts_with("6.25,ssl,1,1,0.6,0,"));
        assert_eq!(r.failed_cells(), 1);
        let row = r.summary_for(6.25, Arm::Baseline).unwrap();
        assert!((row.stats[0].1.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(row.stats[3], (None, None));
        assert!(r.cells_csv().contains(",failed,"));
    }

    #[test]
    fn markdown_follows_fraction_table_layout() {
        let mut base = report(0.7391);
        base.f1 = Some(0.82);
        base.sensitivity = Some(0.83);
        base.specificity = Some(0.37);
        base.precision = Some(0.82);
        let mut ssl = report(0.7676);
        ssl.f1 = Some(0.85);
        ssl.sensitivity = Some(0.87);
        ssl.specificity = Some(0.24);
        ssl.precision = Some(0.82);
        let r = SweepReport {
            protocol: Protocol::FractionSweep,
            aggregate: Aggregate::Median,
            cells: vec![
                CellResult {
                    k_percent: 100.0,
                    fold: 0,
                    seed: 0,
                    arm: Arm::Baseline,
                    outcome: Ok(base),
                },
                CellResult {
                    k_percent: 100.0,
                    fold: 0,
                    seed: 0,
                    arm: Arm::Ssl,
                    outcome: Ok(ssl),
                },
            ],
        };
        let md = r.markdown();
        let lines: Vec<&str> = md.lines().collect();
        assert!(lines[0].starts_with(
            "| Labeled Data | Accuracy (%) Baseline | Accuracy (%) SSL | F1 Score Baseline | F1 Score SSL |"
        ));
        assert_eq!(
            lines[2],
            "| 100% | 73.91 | 76.76 | 0.82 | 0.85 | 0.83 | 0.87 | 0.37 | 0.24 | 0.82 | 0.82 |"
        );
    }

    #[test]
    fn domain_adaptation_table_has_arm_rows() {
        let r = SweepReport {
            protocol: Protocol::DomainAdaptation,
            aggregate: Aggregate::Mean,
            cells: vec![
                cell(100.0, 0, Arm::Baseline, Some(0.7784)),
                cell(100.0, 0, Arm::Ssl, Some(0.7976)),
            ],
        };
        let md = r.markdown();
        assert!(md.contains("| Baseline | 77.84% |"));
        assert!(md.contains("| SSL | 79.76% |"));
        assert!(r.summary_csv().contains("accuracy_mean"));
    }

    fn ood_fixture() -> OodReport {
        let roc = vec![
            RocPoint {
                threshold: f64::INFINITY,
                fpr: 0.0,
                tpr: 0.0,
            },
            RocPoint {
                threshold: 0.5,
                fpr: 1.0,
                tpr: 1.0,
            },
        ];
        let run = |seed, s, k| OodRun {
            seed,
            outcome: Ok(OodRunResult {
                ssl_auroc: s,
                kl_auroc: k,
                baseline_model_auroc: None,
                ssl_roc: roc.clone(),
                kl_roc: roc.clone(),
                in_count: 416,
                out_count: 1685,
            }),
        };
        OodReport {
            runs: vec![run(0, 0.69, 0.55), run(1, 0.71, 0.53), run(2, 0.74, 0.50)],
        }
    }

    #[test]
    fn ood_renderer_fixture() {
        let r = ood_fixture();
        let md = r.markdown();
        assert!(md.contains("| SSL: KL + jigsaw (κ) | 0.71 |"));
        assert!(md.contains("| SSL model: KL only | 0.53 |"));
        let files = report_files(&ExperimentReport::Ood(r.clone()), ReportFormat::Plot).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(files[0].1.matches("<polyline").count(), 2);
        let csv = report_files(&ExperimentReport::Ood(r.clone()), ReportFormat::Csv).unwrap();
        assert_eq!(csv.len(), 3);
        let json = ExperimentReport::Ood(r).to_json().unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ExperimentReport::Ood(ood_fixture()));
    }

    #[test]
    fn overrides_layer_over_presets() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            protocol = "fraction-sweep"
            k_percents = [100.0, 6.25]
            [train]
            epochs = 3
            image_side = 36
            [ssl]
            P = 9
            "#,
        )
        .unwrap();
        let b = cfg.arm_config(Arm::Baseline, 100.0, 4).unwrap();
        assert_eq!((b.epochs, b.learning_rate, b.seed, b.image_side), (3, 1e-3, 4, 36));
        let s = cfg.arm_config(Arm::Ssl, 6.25, 4).unwrap();
        assert_eq!((s.permutations, s.weight_decay, s.lambda_ramp), (9, 0.2, true));
        assert!(ExperimentConfig::from_toml_str("[train]\nbogus = 1\n").is_err());
    }
}

