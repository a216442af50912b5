//! Trains the SSL model and its baseline counterpart on one fold of the
//! synthetic dataset at a small labeled fraction, then reloads the SSL
//! checkpoint.
//!
//! ```bash
//! cargo run --release --example train_semi_supervised -- /tmp/train
//! ```

use std::collections::BTreeSet;

use jigsaw_ssl::dataset::{generate_synthetic_dataset, make_folds, FoldStrategy, SyntheticSpec};
use jigsaw_ssl::experiments::{load_all_images, train_arm};
use jigsaw_ssl::model::{load_checkpoint, InitMode};
use jigsaw_ssl::permset::generate_permutation_set;
use jigsaw_ssl::training::{self, Arm, TrainConfig, TrainingSet};

fn main() -> jigsaw_ssl::Result<()> {
    env_logger::init();
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("jigsaw-train"));
    let spec = SyntheticSpec {
        videos: 200,
        frames_per_video: 10,
        ..Default::default()
    };
    let manifest = generate_synthetic_dataset(&spec, out.join("data"))?;
    let images = load_all_images(&manifest)?;
    let fold = make_folds(&manifest, 1, 0.2, 0, FoldStrategy::IndependentRedraw)?.remove(0);
    let plan = fold.with_fraction(&manifest, 12.5, 0)?;
    println!(
        "D_K: {} labeled frames, D: {} frames, validation: {} frames",
        plan.supervised_record_ids.len(),
        plan.unsupervised_record_ids.len(),
        plan.validation_record_ids.len()
    );

    let cfg = TrainConfig {
        image_side: 36,
        learning_rate: 1e-3,
        epochs: 8,
        k_percent: 12.5,
        ..TrainConfig::default()
    };
    let permset = generate_permutation_set(cfg.grid_size, cfg.permutations, cfg.permutation_pool_size, 0)?;
    let data = TrainingSet {
        validation: &BTreeSet::new(),
        ..TrainingSet::from_plan(&manifest, &images, &plan)
    };

    for arm in [Arm::Baseline, Arm::Ssl] {
        let model = train_arm(arm, &cfg, &InitMode::Random, &data, Some(&permset))?;
        let report = training::evaluate(&model, &manifest, &images, &plan.validation_record_ids, &cfg.augment_config())?;
        println!("{:>8}: {}  (AUROC {:.3})", arm.name(), report.table_row(), report.auroc.unwrap_or(f64::NAN));
        if arm == Arm::Ssl {
            let path = out.join("ssl.ckpt");
            model.save_checkpoint(&path)?;
            let back = load_checkpoint(&path)?;
            println!("checkpoint reload identical: {}", back.checkpoint_bytes() == model.checkpoint_bytes());
        }
    }
    Ok(())
}
