//! Renders the synthetic two-modality dataset and shows how folds and
//! labeled fractions are drawn from it.
//!
//! ```bash
//! cargo run --release --example synthetic_dataset -- /tmp/synthetic
//! ```

use jigsaw_ssl::dataset::{
    class_weights, generate_synthetic_dataset, make_folds, FoldStrategy, Modality, SyntheticSpec, K_PERCENTS,
    NEOPLASTIC,
};

fn main() -> jigsaw_ssl::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("jigsaw-synthetic"));
    let spec = SyntheticSpec {
        videos: 200,
        frames_per_video: 10,
        ..Default::default()
    };
    let manifest = generate_synthetic_dataset(&spec, &out)?;
    println!(
        "{} frames: {} labeled ({} neoplastic), {} WLI, {} NBI",
        manifest.len(),
        manifest.num_labeled(),
        manifest.count_label(NEOPLASTIC),
        manifest.count_modality(Modality::Wli),
        manifest.count_modality(Modality::Nbi),
    );

    let folds = make_folds(&manifest, 5, 0.2, 0, FoldStrategy::IndependentRedraw)?;
    for fold in &folds {
        println!(
            "fold {}: {} validation videos, {} validation frames",
            fold.fold_index,
            fold.validation_video_ids.len(),
            fold.validation_record_ids.len()
        );
    }

    let fold = &folds[0];
    for k in K_PERCENTS {
        let plan = fold.with_fraction(&manifest, k, 0)?;
        let w = class_weights(&manifest, &plan.supervised_record_ids)?;
        println!(
            "k = {k:>6}%: |D_K| = {:>4}, |D| = {:>4}, class weights [{:.3}, {:.3}]",
            plan.supervised_record_ids.len(),
            plan.unsupervised_record_ids.len(),
            w[0],
            w[1]
        );
    }
    println!("manifest at {}", out.join("manifest.csv").display());
    Ok(())
}
