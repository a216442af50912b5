//! The jigsaw shuffler: tile an image, jitter each tile with a random
//! sub-crop, reorder the tiles by a permutation and stitch them back.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, RescaleFilter};
use crate::permset::{Permutation, PermutationSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileGridSpec {
    pub grid_size: usize,
    pub image_side: usize,
    /// Sub-crop side as a fraction of the tile side, `[low, high]`.
    pub crop_ratio_range: [f64; 2],
    pub rescale_filter: RescaleFilter,
    /// Pass identity-labelled samples through untouched instead of jittering
    /// their tiles like scrambled ones.
    pub identity_raw: bool,
}

impl Default for TileGridSpec {
    fn default() -> Self {
        Self {
            grid_size: 3,
            image_side: 222,
            crop_ratio_range: [0.75, 0.9],
            rescale_filter: RescaleFilter::Bilinear,
            identity_raw: false,
        }
    }
}

impl TileGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.image_side % self.grid_size != 0 {
            return Err(Error::Shape(format!(
                "image side {} is not divisible by grid size {}",
                self.image_side, self.grid_size
            )));
        }
        let [low, high] = self.crop_ratio_range;
        if !(low > 0.0 && low <= high && high <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop ratio range [{low}, {high}] must satisfy 0 < low <= high <= 1"
            )));
        }
        Ok(())
    }

    pub fn tile_side(&self) -> usize {
        self.image_side / self.grid_size
    }
}

/// Side of the jitter crop for a given ratio: `floor(ratio · tile_side)`,
/// never below one pixel.
pub fn patch_side(ratio: f64, tile_side: usize) -> usize {
    ((ratio * tile_side as f64).floor() as usize).clamp(1, tile_side)
}

/// Where a tile's jitter crop was taken from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileCrop {
    pub ratio: f64,
    pub side: usize,
    pub offset_y: usize,
    pub offset_x: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShuffledSample {
    pub image: Tensor,
    pub pseudo_label: usize,
}

fn check_image(image: &Tensor, spec: &TileGridSpec) -> Result<()> {
    spec.validate()?;
    if !image.is_square() || image.height != spec.image_side {
        return Err(Error::Shape(format!(
            "expected a {s}x{s} image, got {}x{}",
            image.height,
            image.width,
            s = spec.image_side
        )));
    }
    Ok(())
}

/// [`decompose`] that also reports each tile's crop.
pub fn decompose_traced<R: Rng + ?Sized>(
    image: &Tensor,
    spec: &TileGridSpec,
    rng: &mut R,
) -> Result<(Vec<Tensor>, Vec<TileCrop>)> {
    check_image(image, spec)?;
    let g = spec.grid_size;
    let side = spec.tile_side();
    let [low, high] = spec.crop_ratio_range;
    let mut tiles = Vec::with_capacity(g * g);
    let mut crops = Vec::with_capacity(g * g);
    for row in 0..g {
        for col in 0..g {
            let ratio = rng.gen_range(low..=high);
            let patch = patch_side(ratio, side);
            let oy = rng.gen_range(0..=side - patch);
            let ox = rng.gen_range(0..=side - patch);
            let cropped = image.crop(row * side + oy, col * side + ox, patch, patch)?;
            tiles.push(imaging::resize(&cropped, side, side, spec.rescale_filter));
            crops.push(TileCrop {
                ratio,
                side: patch,
                offset_y: oy,
                offset_x: ox,
            });
        }
    }
    Ok((tiles, crops))
}

/// Splits a square image into `G²` row-major tiles, each replaced by a
/// randomly placed sub-crop rescaled back to the tile side.
pub fn decompose<R: Rng + ?Sized>(
    image: &Tensor,
    spec: &TileGridSpec,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    decompose_traced(image, spec, rng).map(|(tiles, _)| tiles)
}

/// Stitches tiles into a square image; output grid position `i` receives
/// tile `p.order()[i]`.
pub fn recompose(tiles: &[Tensor], p: &Permutation) -> Result<Tensor> {
    let n = tiles.len();
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || p.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "{n} tiles do not form a square grid for a permutation of length {}",
            p.len()
        )));
    }
    let (c, side, _) = tiles[0].shape();
    if tiles.iter().any(|t| t.shape() != (c, side, side)) {
        return Err(Error::Shape("tiles must be square and equally sized".into()));
    }
    let mut out = Tensor::zeros(c, g * side, g * side);
    for (pos, &src) in p.order().iter().enumerate() {
        out.paste(&tiles[src], (pos / g) * side, (pos % g) * side)?;
    }
    Ok(out)
}

/// Builds one pseudo-labelled jigsaw input. Scrambled samples draw their
/// label uniformly from `1..=P`; unscrambled samples get label 0.
pub fn make_jigsaw_sample<R: Rng + ?Sized>(
    image: &Tensor,
    permset: &PermutationSet,
    spec: &TileGridSpec,
    scramble: bool,
    rng: &mut R,
) -> Result<ShuffledSample> {
    if permset.grid_size() != spec.grid_size {
        return Err(Error::InvalidArgument(format!(
            "permutation set grid {} does not match tile grid {}",
            permset.grid_size(),
            spec.grid_size
        )));
    }
    let pseudo_label = if scramble {
        rng.gen_range(1..=permset.len())
    } else {
        0
    };
    make_jigsaw_sample_with_label(image, permset, spec, pseudo_label, rng)
}

/// Same as [`make_jigsaw_sample`] with a caller-chosen pseudo-label.
pub fn make_jigsaw_sample_with_label<R: Rng + ?Sized>(
    image: &Tensor,
    permset: &PermutationSet,
    spec: &TileGridSpec,
    pseudo_label: usize,
    rng: &mut R,
) -> Result<ShuffledSample> {
    let perm = permset.get(pseudo_label)?;
    if pseudo_label == 0 && spec.identity_raw {
        check_image(image, spec)?;
        return Ok(ShuffledSample {
            image: image.clone(),
            pseudo_label,
        });
    }
    let tiles = decompose(image, spec, rng)?;
    Ok(ShuffledSample {
        image: recompose(&tiles, &perm)?,
        pseudo_label,
    })
}

/// Writes samples as `<sampleid>_<pseudolabel>.png`, undoing normalization
/// when `normalization` is given.
pub fn dump_shuffled(
    dir: impl AsRef<Path>,
    samples: &[(String, ShuffledSample)],
    normalization: Option<(&[f64; 3], &[f64; 3])>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (id, sample) in samples {
        let mut img = sample.image.clone();
        if let Some((mean, std)) = normalization {
            imaging::denormalize(&mut img, mean, std);
        }
        imaging::save_png(&img, dir.join(format!("{id}_{}.png", sample.pseudo_label)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permset::generate_permutation_set;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
        Tensor::from_vec(3, side, side, (0..3 * side * side).map(|_| rng.gen()).collect()).unwrap()
    }

    fn exact_spec(side: usize, grid: usize) -> TileGridSpec {
        TileGridSpec {
            grid_size: grid,
            image_side: side,
            crop_ratio_range: [1.0, 1.0],
            ..Default::default()
        }
    }

    #[test]
    fn full_size_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = TileGridSpec::default();
        let img = random_image(&mut rng, 222);
        let (tiles, crops) = decompose_traced(&img, &spec, &mut rng).unwrap();
        assert_eq!(tiles.len(), 9);
        assert!(tiles.iter().all(|t| t.shape() == (3, 74, 74)));
        assert!(crops.iter().all(|c| (55..=66).contains(&c.side)));
        assert!(crops.iter().all(|c| c.offset_y + c.side <= 74 && c.offset_x + c.side <= 74));
        assert_eq!(patch_side(0.75, 74), 55);
        assert_eq!(patch_side(0.9, 74), 66);
    }

    #[test]
    fn full_ratio_tiles_are_raw_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = exact_spec(12, 3);
        let img = random_image(&mut rng, 12);
        let tiles = decompose(&img, &spec, &mut rng).unwrap();
        for (i, tile) in tiles.iter().enumerate() {
            assert_eq!(tile, &img.crop((i / 3) * 4, (i % 3) * 4, 4, 4).unwrap());
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = exact_spec(12, 3);
        let not_square = Tensor::zeros(3, 12, 9);
        assert!(matches!(decompose(&not_square, &spec, &mut rng), Err(Error::Shape(_))));
        let bad_spec = exact_spec(10, 3);
        assert!(decompose(&Tensor::zeros(3, 10, 10), &bad_spec, &mut rng).is_err());
        let tiles = vec![Tensor::zeros(3, 4, 4); 8];
        assert!(recompose(&tiles, &Permutation::identity(9)).is_err());
    }

    #[test]
    fn identity_label_and_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = generate_permutation_set(3, 30, 1_000, 0).unwrap();
        let spec = TileGridSpec::default();
        let img = random_image(&mut rng, 222);
        let s = make_jigsaw_sample(&img, &set, &spec, false, &mut rng).unwrap();
        assert_eq!(s.pseudo_label, 0);
        let s = make_jigsaw_sample(&img, &set, &spec, true, &mut rng).unwrap();
        assert!((1..=30).contains(&s.pseudo_label));
        assert_eq!(s.image.shape(), (3, 222, 222));
    }

    #[test]
    fn identity_raw_passes_image_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = generate_permutation_set(3, 5, 100, 0).unwrap();
        let spec = TileGridSpec {
            image_side: 12,
            identity_raw: true,
            ..Default::default()
        };
        let img = random_image(&mut rng, 12);
        let s = make_jigsaw_sample(&img, &set, &spec, false, &mut rng).unwrap();
        assert_eq!(s.image, img);
    }

    #[test]
    fn scrambled_labels_are_uniform() {
        // Thirty separate 3-sigma checks reject a fair sampler roughly one
        // time in ten, so the chi-square bound is the primary check and the
        // per-label bound runs on a fixed seed.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = generate_permutation_set(3, 30, 1_000, 0).unwrap();
        let spec = exact_spec(6, 3);
        let img = random_image(&mut rng, 6);
        let n = 30_000usize;
        let mut counts = [0usize; 31];
        for _ in 0..n {
            counts[make_jigsaw_sample(&img, &set, &spec, true, &mut rng)
                .unwrap()
                .pseudo_label] += 1;
        }
        assert_eq!(counts[0], 0);
        // Binomial(n, 1/30): mean 1000, sigma = sqrt(n p (1-p)) ≈ 31.09.
        let p = 1.0 / 30.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let expected = n as f64 * p;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 29 degrees of freedom: the 0.999 quantile is 58.3.
        assert!(chi2 < 58.3, "chi2 {chi2}");
        for &c in &counts[1..] {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn scrambled_sample_unscrambles_with_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = generate_permutation_set(3, 10, 500, 2).unwrap();
        let spec = exact_spec(12, 3);
        let img = random_image(&mut rng, 12);
        let s = make_jigsaw_sample(&img, &set, &spec, true, &mut rng).unwrap();
        let blocks = decompose(&s.image, &spec, &mut rng).unwrap();
        let perm = set.get(s.pseudo_label).unwrap();
        assert_eq!(recompose(&blocks, &perm.inverse()).unwrap(), img);
    }

    #[test]
    fn dump_writes_named_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let sample = ShuffledSample {
            image: Tensor::zeros(3, 6, 6),
            pseudo_label: 7,
        };
        dump_shuffled(dir.path(), &[("abc".into(), sample)], None).unwrap();
        assert!(dir.path().join("abc_7.png").exists());
    }
}
