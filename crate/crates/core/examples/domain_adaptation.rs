//! Trains on labeled WLI frames, lets the SSL arm also solve puzzles on
//! unlabeled NBI frames, and tests both arms on labeled NBI frames.
//!
//! ```bash
//! cargo run --release --example domain_adaptation -- /tmp/da
//! ```

use jigsaw_ssl::dataset::{generate_synthetic_dataset, SyntheticSpec};
use jigsaw_ssl::experiments::{domain_split, load_all_images, run_domain_adaptation_on, ExperimentConfig};

const CONFIG: &str = r#"
protocol = "domain-adaptation"
seeds = [0, 1]
preset = "default"
source_modality = "WLI"
target_modality = "NBI"

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
        .unwrap_or_else(|| std::env::temp_dir().join("jigsaw-da"));
    let spec = SyntheticSpec {
        videos: 200,
        frames_per_video: 10,
        ..Default::default()
    };
    let manifest = generate_synthetic_dataset(&spec, out.join("data"))?;
    let images = load_all_images(&manifest)?;
    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;

    let split = domain_split(&manifest, cfg.source_modality, cfg.target_modality)?;
    println!(
        "labeled source {}, jigsaw set {}, labeled target test {}",
        split.labeled_source.len(),
        split.unsupervised.len(),
        split.test.len()
    );
    let report = run_domain_adaptation_on(&cfg, &manifest, &images)?;
    print!("{}", report.markdown());
    Ok(())
}
