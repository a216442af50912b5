//! Trains on WLI frames only and asks whether NBI frames can be told apart
//! using the class posterior alone or together with the jigsaw head.
//!
//! ```bash
//! cargo run --release --example ood_detection -- /tmp/ood
//! ```

use jigsaw_ssl::dataset::{generate_synthetic_dataset, SyntheticSpec};
use jigsaw_ssl::experiments::{
    load_all_images, ood_split, render_all, run_ood_experiment_on, ExperimentConfig, ExperimentReport,
};

const CONFIG: &str = r#"
protocol = "ood"
seeds = [0]
preset = "default"
ood_train_baseline = false

[ood]
mode = "identity"

[train]
image_side = 36
learning_rate = 1e-3
epochs = 6
"#;

fn main() -> jigsaw_ssl::Result<()> {
    env_logger::init();
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("jigsaw-ood"));
    let spec = SyntheticSpec {
        videos: 200,
        frames_per_video: 10,
        ..Default::default()
    };
    let manifest = generate_synthetic_dataset(&spec, out.join("data"))?;
    let images = load_all_images(&manifest)?;
    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;

    let split = ood_split(&cfg, &manifest)?;
    println!(
        "train on {} labeled / {} total WLI frames; score {} held-out WLI vs {} NBI",
        split.supervised.len(),
        split.unsupervised.len(),
        split.in_distribution.len(),
        split.out_of_distribution.len()
    );
    let report = run_ood_experiment_on(&cfg, &manifest, &images)?;
    print!("{}", report.markdown());
    for path in render_all(&ExperimentReport::Ood(report), out.join("report"))? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
