use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jigsaw_ssl::dataset::{self, FoldStrategy, Modality, SyntheticSpec};
use jigsaw_ssl::experiments::{self, ExperimentConfig, ExperimentReport, Protocol, ReportFormat};
use jigsaw_ssl::model::{self, InitMode};
use jigsaw_ssl::ood::{self, OodConfig, OodMode};
use jigsaw_ssl::permset::{self, PermutationSet, DEFAULT_POOL_SIZE};
use jigsaw_ssl::shuffler;
use jigsaw_ssl::training::{self, Arm, TrainConfig, TrainingSet};
use jigsaw_ssl::{metrics, Error, Result};

#[derive(Parser)]
#[command(name = "jigsaw", version, about = "Jigsaw-puzzle semi-supervised training and evaluation")]
struct Cli {
    /// TOML config: training hyperparameters for `train`, `eval` and
    /// `ood-score`; an experiment config for `sweep` and `domain-adapt`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for independent experiment cells.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a maximal-Hamming permutation set.
    GenPerms(GenPermsArgs),
    /// Render a synthetic two-class, two-modality dataset.
    SynthData(SynthArgs),
    /// Train one model on one fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the labeled records of a manifest.
    Eval(EvalArgs),
    /// Labeled-fraction sweep, or any protocol named in the config.
    Sweep,
    /// Domain-adaptation protocol.
    DomainAdapt,
    /// Score in- and out-of-distribution manifests with a checkpoint, or run
    /// the full OOD protocol when no checkpoint is given.
    OodScore(OodArgs),
    /// Re-render a saved report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenPermsArgs {
    #[arg(long, default_value_t = 3)]
    grid: usize,
    #[arg(long = "P", alias = "count", default_value_t = 30)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_POOL_SIZE)]
    pool: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    videos: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 40)]
    side: usize,
    #[arg(long, default_value_t = 0.6)]
    label_fraction: f64,
    #[arg(long, default_value_t = 0.4)]
    nbi_fraction: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Baseline,
    Ssl,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "ssl")]
    arm: ArmArg,
    /// Labeled percentage; defaults to the config's `k_percent`.
    #[arg(long)]
    k: Option<f64>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, default_value_t = 5)]
    n_folds: usize,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Start from the encoder weights of another checkpoint.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Write one batch of jigsaw inputs as `<sampleid>_<pseudolabel>.png`.
    #[arg(long)]
    dump_shuffled: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Restrict to one modality (WLI or NBI).
    #[arg(long)]
    modality: Option<Modality>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Identity,
    Scramble,
    KlOnly,
}

#[derive(Args)]
struct OodArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    in_manifest: Option<PathBuf>,
    #[arg(long)]
    out_manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "identity")]
    mode: ModeArg,
    /// Scrambles per image in scramble mode.
    #[arg(long = "M", default_value_t = 4)]
    scrambles: usize,
    #[arg(long)]
    negate_kl: bool,
    /// Permutation file; regenerated from the checkpoint metadata if absent.
    #[arg(long)]
    permutations: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "out/report.json")]
    input: PathBuf,
    /// csv, markdown, plot, json; all of them when omitted.
    #[arg(long)]
    format: Option<ReportFormat>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failures) => {
            eprintln!("{failures} cell(s) failed; see the report for details");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Runs the command and returns the number of failed cells.
fn run(cli: &Cli) -> Result<usize> {
    match &cli.command {
        Command::GenPerms(a) => gen_perms(cli, a),
        Command::SynthData(a) => synth_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Sweep => run_protocol(cli, None),
        Command::DomainAdapt => run_protocol(cli, Some(Protocol::DomainAdaptation)),
        Command::OodScore(a) => match &a.checkpoint {
            Some(ck) => ood_score(cli, a, ck),
            None => run_protocol(cli, Some(Protocol::Ood)),
        },
        Command::Report(a) => report(cli, a),
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn gen_perms(cli: &Cli, a: &GenPermsArgs) -> Result<usize> {
    let set = permset::generate_permutation_set(a.grid, a.count, a.pool, cli.seed.unwrap_or(0))?;
    std::fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("permutations.txt");
    set.save(&path)?;
    println!(
        "wrote {} permutations (min pairwise Hamming distance {}) to {}",
        set.len(),
        set.min_pairwise_hamming(),
        path.display()
    );
    Ok(0)
}

fn synth_data(cli: &Cli, a: &SynthArgs) -> Result<usize> {
    let spec = SyntheticSpec {
        videos: a.videos,
        frames_per_video: a.frames,
        image_side: a.side,
        label_fraction: a.label_fraction,
        nbi_fraction: a.nbi_fraction,
        seed: cli.seed.unwrap_or(0),
        ..SyntheticSpec::default()
    };
    let m = dataset::generate_synthetic_dataset(&spec, &cli.out)?;
    println!(
        "wrote {} frames ({} labeled, {} WLI, {} NBI) to {}",
        m.len(),
        m.num_labeled(),
        m.count_modality(Modality::Wli),
        m.count_modality(Modality::Nbi),
        cli.out.join("manifest.csv").display()
    );
    Ok(0)
}

fn permset_for(cfg: &TrainConfig) -> Result<PermutationSet> {
    permset::generate_permutation_set(
        cfg.grid_size,
        cfg.permutations,
        cfg.permutation_pool_size,
        cfg.permutation_seed,
    )
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<usize> {
    let mut cfg = train_config(cli)?;
    if let Some(k) = a.k {
        cfg.k_percent = k;
    }
    cfg.validate()?;
    let arm = match a.arm {
        ArmArg::Baseline => Arm::Baseline,
        ArmArg::Ssl => Arm::Ssl,
    };
    let manifest = dataset::load_manifest(&a.manifest)?;
    let folds = dataset::make_folds(&manifest, a.n_folds, a.val_fraction, cfg.seed, FoldStrategy::IndependentRedraw)?;
    let fold = folds
        .get(a.fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {} of {}", a.fold, a.n_folds)))?;
    let plan = fold.with_fraction(&manifest, cfg.k_percent, cfg.seed)?;
    let images = experiments::load_all_images(&manifest)?;
    let set = permset_for(&cfg)?;
    std::fs::create_dir_all(&cli.out)?;

    if let Some(dir) = &a.dump_shuffled {
        let spec = cfg.tile_spec();
        let augment = cfg.augment_config();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ids: Vec<usize> = plan
            .unsupervised_record_ids
            .iter()
            .copied()
            .take(cfg.batch_size_unsupervised)
            .collect();
        let prepared: Vec<_> = ids.iter().map(|id| augment.eval_transform(&images[id])).collect();
        let batch = training::compose_batch_unsupervised(&prepared, &set, &spec, cfg.scramble_fraction, &mut rng)?;
        let named: Vec<(String, shuffler::ShuffledSample)> = ids
            .iter()
            .zip(batch)
            .map(|(id, s)| (format!("{id:05}"), s))
            .collect();
        shuffler::dump_shuffled(dir, &named, Some((&augment.mean, &augment.std)))?;
        log::info!("dumped {} shuffled samples to {}", named.len(), dir.display());
    }

    let init = a.pretrained.clone().map_or(InitMode::Random, InitMode::Pretrained);
    let data = TrainingSet::from_plan(&manifest, &images, &plan);
    let mut model = match arm {
        Arm::Baseline => model::build_baseline_model(cfg.encoder, &init, cfg.seed)?,
        Arm::Ssl => model::build_model(cfg.encoder, cfg.permutations, &init, cfg.seed)?,
    };
    let history = training::train(&mut model, &data, (arm == Arm::Ssl).then_some(&set), &cfg)?;
    model.save_checkpoint(cli.out.join("model.ckpt"))?;
    history.save_csv(cli.out.join("history.csv"))?;
    std::fs::write(cli.out.join("train_config.toml"), cfg.to_toml_string())?;
    if arm == Arm::Ssl {
        set.save(cli.out.join("permutations.txt"))?;
    }
    let report = training::evaluate(&model, &manifest, &images, &plan.validation_record_ids, &cfg.augment_config())?;
    report.save_json(cli.out.join("metrics.json"))?;
    println!("validation: {}", report.table_row());
    Ok(0)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<usize> {
    let cfg = train_config(cli)?;
    let model = model::load_checkpoint(&a.checkpoint)?;
    let manifest = dataset::load_manifest(&a.manifest)?;
    let ids = manifest.ids_where(|r| r.is_labeled() && a.modality.map_or(true, |m| r.modality == m));
    let images = dataset::load_images(&manifest, ids.iter().copied())?;
    let report = training::evaluate(&model, &manifest, &images, &ids, &cfg.augment_config())?;
    std::fs::create_dir_all(&cli.out)?;
    report.save_json(cli.out.join("metrics.json"))?;
    if let Some(roc) = &report.roc {
        metrics::write_roc_csv(roc, cli.out.join("roc.csv"))?;
    }
    println!("{} labeled frames: {}", ids.len(), report.table_row());
    Ok(0)
}

fn run_protocol(cli: &Cli, protocol: Option<Protocol>) -> Result<usize> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config FILE with an experiment config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(p) = protocol {
        cfg.protocol = p;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let report = experiments::run_experiment(&cfg)?;
    for p in experiments::render_all(&report, &cli.out)? {
        log::info!("wrote {}", p.display());
    }
    print_summary(&report);
    Ok(report.failures())
}

fn print_summary(report: &ExperimentReport) {
    match report {
        ExperimentReport::Sweep(r) => print!("{}", r.markdown()),
        ExperimentReport::Ood(r) => print!("{}", r.markdown()),
    }
}

fn load_prepared(path: &Path, cfg: &TrainConfig) -> Result<Vec<jigsaw_ssl::Tensor>> {
    let manifest = dataset::load_manifest(path)?;
    let augment = cfg.augment_config();
    (0..manifest.len())
        .map(|i| Ok(augment.eval_transform(&jigsaw_ssl::imaging::load_rgb(manifest.resolve(i))?)))
        .collect()
}

fn ood_score(cli: &Cli, a: &OodArgs, checkpoint: &Path) -> Result<usize> {
    let (Some(in_path), Some(out_path)) = (&a.in_manifest, &a.out_manifest) else {
        return Err(Error::InvalidArgument("--in-manifest and --out-manifest are required with --checkpoint".into()));
    };
    let cfg = train_config(cli)?;
    let model = model::load_checkpoint(checkpoint)?;
    let mode = match a.mode {
        ModeArg::Identity => OodMode::Identity,
        ModeArg::Scramble => OodMode::Scramble,
        ModeArg::KlOnly => OodMode::KlOnly,
    };
    let set = match (&a.permutations, model.permset()) {
        (_, None) => None,
        (Some(p), Some(_)) => Some(PermutationSet::load(p)?),
        (None, Some(r)) => Some(permset::generate_permutation_set(
            r.grid_size,
            r.permutations,
            cfg.permutation_pool_size,
            r.seed,
        )?),
    };
    if set.is_none() && mode != OodMode::KlOnly {
        return Err(Error::Capability("checkpoint has no jigsaw head; use --mode kl-only".into()));
    }
    let ood_cfg = OodConfig {
        mode,
        scrambles: a.scrambles,
        negate_kl: a.negate_kl,
        scramble_fraction: cfg.scramble_fraction,
    };
    let inside = load_prepared(in_path, &cfg)?;
    let outside = load_prepared(out_path, &cfg)?;
    let spec = cfg.tile_spec();
    let eval = ood::evaluate_ood(&model, &inside, &outside, set.as_ref(), &spec, &ood_cfg, cfg.seed)?;
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("ood_scores.csv"), eval.scores_csv())?;
    metrics::write_roc_csv(&eval.roc, cli.out.join("roc.csv"))?;
    std::fs::write(
        cli.out.join("ood_summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "mode": ood_cfg.mode,
            "scrambles": ood_cfg.scrambles,
            "negate_kl": ood_cfg.negate_kl,
            "in_count": inside.len(),
            "out_count": outside.len(),
            "auroc": eval.auroc,
        }))? + "\n",
    )?;
    println!("AUROC {:.4} ({} in, {} out)", eval.auroc, inside.len(), outside.len());
    Ok(0)
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<usize> {
    let report = ExperimentReport::load(&a.input)?;
    let paths = match a.format {
        Some(f) => experiments::render_report(&report, f, &cli.out)?,
        None => experiments::render_all(&report, &cli.out)?,
    };
    for p in paths {
        println!("{}", p.display());
    }
    Ok(report.failures())
}
