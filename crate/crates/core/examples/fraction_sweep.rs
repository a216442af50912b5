//! A small labeled-fraction sweep: baseline and SSL arms per fold and
//! fraction, summarized as tables and plots.
//!
//! ```bash
//! cargo run --release --example fraction_sweep -- /tmp/sweep
//! ```

use jigsaw_ssl::dataset::{generate_synthetic_dataset, SyntheticSpec};
use jigsaw_ssl::experiments::{load_all_images, render_all, run_fraction_sweep_on, ExperimentConfig, ExperimentReport};

const CONFIG: &str = r#"
protocol = "fraction-sweep"
k_percents = [100.0, 25.0, 6.25]
n_folds = 2
preset = "default"

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
        .unwrap_or_else(|| std::env::temp_dir().join("jigsaw-sweep"));
    let spec = SyntheticSpec {
        videos: 200,
        frames_per_video: 10,
        ..Default::default()
    };
    let manifest = generate_synthetic_dataset(&spec, out.join("data"))?;
    let images = load_all_images(&manifest)?;

    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    let report = run_fraction_sweep_on(&cfg, &manifest, &images)?;
    print!("{}", report.markdown());
    for path in render_all(&ExperimentReport::Sweep(report), out.join("report"))? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
