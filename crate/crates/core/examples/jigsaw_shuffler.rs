//! Cuts a synthetic frame into a 3x3 grid, scrambles it with a few labels,
//! and writes the results as PNG files.
//!
//! ```bash
//! cargo run --release --example jigsaw_shuffler -- /tmp/shuffled
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jigsaw_ssl::dataset::{generate_synthetic_dataset, SyntheticSpec};
use jigsaw_ssl::imaging;
use jigsaw_ssl::permset::{generate_permutation_set, DEFAULT_POOL_SIZE};
use jigsaw_ssl::shuffler::{decompose, dump_shuffled, make_jigsaw_sample_with_label, recompose, TileGridSpec};

fn main() -> jigsaw_ssl::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("jigsaw-shuffler"));
    let spec = SyntheticSpec {
        videos: 2,
        frames_per_video: 1,
        image_side: 96,
        ..Default::default()
    };
    let manifest = generate_synthetic_dataset(&spec, out.join("data"))?;
    let image = imaging::load_rgb(manifest.resolve(0))?;

    let permset = generate_permutation_set(3, 30, DEFAULT_POOL_SIZE, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Without jitter crops, tiling and stitching back is lossless.
    let exact = TileGridSpec {
        image_side: 96,
        crop_ratio_range: [1.0, 1.0],
        ..Default::default()
    };
    let tiles = decompose(&image, &exact, &mut rng)?;
    let back = recompose(&tiles, &permset.get(0)?)?;
    println!("round trip exact: {}", back == image);

    let jitter = TileGridSpec {
        image_side: 96,
        ..Default::default()
    };
    let samples = [0, 1, 5, 30]
        .iter()
        .map(|&label| {
            let s = make_jigsaw_sample_with_label(&image, &permset, &jitter, label, &mut rng)?;
            Ok((format!("frame0_{label:02}"), s))
        })
        .collect::<jigsaw_ssl::Result<Vec<_>>>()?;
    dump_shuffled(out.join("shuffled"), &samples, None)?;
    println!("wrote {} samples to {}", samples.len(), out.join("shuffled").display());
    Ok(())
}
