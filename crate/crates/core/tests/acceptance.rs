//! Acceptance checks, one pass/fail line per criterion.
//!
//! ```bash
//! cargo test --release --test acceptance          # all criteria
//! cargo test --release --test acceptance -- 7 9   # a subset
//! ```
//!
//! Criteria 7 to 9 train real models on a freshly rendered synthetic
//! dataset (200 videos of 10 frames, about 2,000 frames) and take a few
//! minutes each on one core.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jigsaw_ssl::dataset::{generate_synthetic_dataset, DatasetManifest, SyntheticSpec};
use jigsaw_ssl::experiments::{
    load_all_images, run_domain_adaptation_on, run_fraction_sweep_on, run_ood_experiment_on, ExperimentConfig,
};
use jigsaw_ssl::metrics::{roc_curve, trapezoid_area};
use jigsaw_ssl::model::{build_model, DualHeadModel, EncoderDescriptor, Head, InitMode};
use jigsaw_ssl::nn::ParamId;
use jigsaw_ssl::optim::AdamW;
use jigsaw_ssl::permset::{
    all_permutations, audit_greedy_selection, generate_permutation_set, hamming_distance, Permutation,
    DEFAULT_POOL_SIZE,
};
use jigsaw_ssl::shuffler::{decompose, make_jigsaw_sample, recompose, ShuffledSample, TileGridSpec};
use jigsaw_ssl::training::{
    self, compose_batch_unsupervised, jigsaw_class_weights, lambda_at, supervised_loss, unsupervised_loss, Arm,
    TrainConfig,
};
use jigsaw_ssl::Tensor;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
    Tensor::from_vec(3, side, side, (0..3 * side * side).map(|_| rng.gen()).collect()).unwrap()
}

fn synthetic(dir: &Path) -> DatasetManifest {
    let spec = SyntheticSpec {
        videos: 200,
        frames_per_video: 10,
        ..SyntheticSpec::default()
    };
    generate_synthetic_dataset(&spec, dir).expect("synthetic dataset")
}

/// Shared hyperparameters of the directional experiments. Both arms train
/// at 36 px with the same optimizer settings; the SSL arm weights the
/// jigsaw loss by 0.5.
const DESK_SCALE: &str = r#"
preset = "default"

[train]
image_side = 36
learning_rate = 1e-3
epochs = 20

[ssl]
lambda = 0.5
"#;

fn criterion_1() -> Outcome {
    let set = generate_permutation_set(2, 3, DEFAULT_POOL_SIZE, 0).map_err(|e| e.to_string())?;
    let perms: Vec<Permutation> = all_permutations(4).into_iter().filter(|p| !p.is_identity()).collect();
    let d = |a: &Permutation, b: &Permutation| hamming_distance(a, b).unwrap();
    let mut best = 0;
    for i in 0..perms.len() {
        for j in i + 1..perms.len() {
            for k in j + 1..perms.len() {
                best = best.max(d(&perms[i], &perms[j]).min(d(&perms[i], &perms[k])).min(d(&perms[j], &perms[k])));
            }
        }
    }
    let got = set.min_pairwise_hamming();
    check(
        perms.len() == 23 && got == best,
        format!("greedy max-min distance {got}, exhaustive optimum {best} over 23 candidates"),
    )
}

fn criterion_2() -> Outcome {
    let set = generate_permutation_set(3, 30, DEFAULT_POOL_SIZE, 0).map_err(|e| e.to_string())?;
    let perms = set.scrambled();
    let distinct: BTreeSet<&[usize]> = perms.iter().map(|p| p.order()).collect();
    let no_identity = perms.iter().all(|p| !p.is_identity());
    let min = set.min_pairwise_hamming();
    let audit = audit_greedy_selection(&set, DEFAULT_POOL_SIZE);
    check(
        perms.len() == 30 && distinct.len() == 30 && no_identity && min > 1 && audit.is_ok(),
        format!(
            "{} distinct non-identity permutations, min distance {min}, greedy audit {}",
            distinct.len(),
            if audit.is_ok() { "confirmed" } else { "failed" }
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = generate_permutation_set(3, 30, DEFAULT_POOL_SIZE, 0).map_err(|e| e.to_string())?;
    let spec = TileGridSpec {
        grid_size: 3,
        image_side: 36,
        crop_ratio_range: [1.0, 1.0],
        ..TileGridSpec::default()
    };
    let mut failures = 0;
    for i in 0..100 {
        let x = random_image(&mut rng, 36);
        let tiles = decompose(&x, &spec, &mut rng).unwrap();
        if recompose(&tiles, &Permutation::identity(9)).unwrap() != x {
            failures += 1;
        }
        let p = set.get(1 + i % 30).unwrap();
        let scrambled = recompose(&tiles, &p).unwrap();
        let again = decompose(&scrambled, &spec, &mut rng).unwrap();
        if recompose(&again, &p.inverse()).unwrap() != x {
            failures += 1;
        }
    }
    check(failures == 0, format!("{failures} inexact round trips over 100 images"))
}

fn unweighted_ce(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - l[y]
        })
        .sum();
    total / logits.len() as f64
}

fn loss_of(model: &DualHeadModel, head: Head, images: &[Tensor], labels: &[usize], w: &[f64]) -> f64 {
    match head {
        Head::Supervised => {
            let logits = model.forward_supervised(images).unwrap();
            let l: Vec<u8> = labels.iter().map(|&v| v as u8).collect();
            supervised_loss(&logits, &l, &[w[0], w[1]]).unwrap()
        }
        Head::Jigsaw => unsupervised_loss(&model.forward_jigsaw(images).unwrap(), labels, w).unwrap(),
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over `count` random trainable coordinates of `head`.
fn gradient_check(
    model: &mut DualHeadModel,
    head: Head,
    images: &[Tensor],
    labels: &[usize],
    w: &[f64],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let grads = match head {
        Head::Supervised => {
            let l: Vec<u8> = labels.iter().map(|&v| v as u8).collect();
            training::supervised_gradients(model, images, &l, &[w[0], w[1]]).unwrap().1
        }
        Head::Jigsaw => {
            let samples: Vec<ShuffledSample> = images
                .iter()
                .zip(labels)
                .map(|(x, &y)| ShuffledSample {
                    image: x.clone(),
                    pseudo_label: y,
                })
                .collect();
            training::unsupervised_gradients(model, &samples, w, 1.0).unwrap().1
        }
    };
    let ids: Vec<ParamId> = model.trainable_ids(head).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let id = ids[rng.gen_range(0..ids.len())];
        let j = rng.gen_range(0..model.params().data(id).len());
        let original = model.params().data(id)[j];
        model.params_mut().get_mut(id).data[j] = original + h;
        let up = loss_of(model, head, images, labels, w);
        model.params_mut().get_mut(id).data[j] = original - h;
        let down = loss_of(model, head, images, labels, w);
        model.params_mut().get_mut(id).data[j] = original;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id)[j];
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // (a) Unit weights reduce both losses to plain cross-entropy.
    let mut worst_a: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(1..9);
        let bin: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.gen_range(-6.0..6.0)).collect()).collect();
        let by: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let byu: Vec<usize> = by.iter().map(|&v| v as usize).collect();
        let jig: Vec<Vec<f64>> = (0..n).map(|_| (0..31).map(|_| rng.gen_range(-6.0..6.0)).collect()).collect();
        let jy: Vec<usize> = (0..n).map(|_| rng.gen_range(0..31)).collect();
        worst_a = worst_a
            .max((supervised_loss(&bin, &by, &[1.0, 1.0]).unwrap() - unweighted_ce(&bin, &byu)).abs())
            .max((unsupervised_loss(&jig, &jy, &[1.0; 31]).unwrap() - unweighted_ce(&jig, &jy)).abs());
    }

    // (b) Hand examples. Label 1 (neoplastic, frequency 0.83) carries
    // 1.2048 and label 0 carries 5.8824.
    let ln = |p: [f64; 2]| vec![p[0].ln(), p[1].ln()];
    let sup = supervised_loss(&[ln([0.2, 0.8]), ln([0.6, 0.4])], &[1, 0], &[5.8824, 1.2048]).unwrap();
    let sup_err = (sup - 1.636_861_999_932_211_8).abs();
    let w = jigsaw_class_weights(0.6, 30).unwrap();
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..31).map(|c| ((c * 7 + i * 3) % 11) as f64 * 0.25 - 1.0).collect())
        .collect();
    let unsup = unsupervised_loss(&rows, &[0, 4, 30], &w).unwrap();
    let unsup_err = (unsup - 103.158_258_387_627_14).abs();
    let weights_ok = (w[0] - 2.5).abs() < 1e-12 && w[1..].iter().all(|&v| (v - 50.0).abs() < 1e-9);

    // (c) Finite differences on the tiny encoder.
    let mut model = build_model(EncoderDescriptor::TinyCnn, 5, &InitMode::Random, 4).unwrap();
    let images: Vec<Tensor> = (0..4)
        .map(|_| {
            let mut t = random_image(&mut rng, 24);
            t.data.iter_mut().for_each(|v| *v = (*v - 0.5) * 4.0);
            t
        })
        .collect();
    let sup_fd = gradient_check(&mut model, Head::Supervised, &images, &[1, 0, 1, 1], &[5.8824, 1.2048], 100, &mut rng);
    let jw = jigsaw_class_weights(0.6, 5).unwrap();
    let unsup_fd = gradient_check(&mut model, Head::Jigsaw, &images, &[0, 3, 5, 1], &jw, 100, &mut rng);

    check(
        worst_a < 1e-6 && sup_err < 1e-6 && unsup_err < 1e-6 && weights_ok && sup_fd < 1e-3 && unsup_fd < 1e-3,
        format!(
            "(a) max diff {worst_a:.1e}; (b) errors {sup_err:.1e}, {unsup_err:.1e}; \
             (c) worst relative gradient error {sup_fd:.1e} supervised, {unsup_fd:.1e} jigsaw"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = build_model(EncoderDescriptor::TinyCnn, 5, &InitMode::Random, 5).unwrap();
    let set = generate_permutation_set(3, 5, 1000, 0).unwrap();
    let spec = TileGridSpec {
        image_side: 24,
        ..TileGridSpec::default()
    };
    let sup_head = model.head_param_ids(Head::Supervised).unwrap();
    let jig_head = model.head_param_ids(Head::Jigsaw).unwrap();
    let snapshot = |m: &DualHeadModel, ids: &[ParamId]| -> Vec<Vec<u64>> {
        ids.iter()
            .map(|&id| m.params().data(id).iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    let mut opt = AdamW::new(model.params(), 1e-2, 0.05);
    let weights = jigsaw_class_weights(0.6, 5).unwrap();
    let mut violations = 0;
    let mut moved = 0;
    for _ in 0..10 {
        let images: Vec<Tensor> = (0..4).map(|_| random_image(&mut rng, 24)).collect();
        let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..2)).collect();
        let (s0, u0) = (snapshot(&model, &sup_head), snapshot(&model, &jig_head));
        training::supervised_step(&mut model, &mut opt, &images, &labels, &[1.0, 2.0]).unwrap();
        violations += usize::from(snapshot(&model, &jig_head) != u0);
        moved += usize::from(snapshot(&model, &sup_head) != s0);

        let samples = compose_batch_unsupervised(&images, &set, &spec, 0.6, &mut rng).unwrap();
        let (s1, u1) = (snapshot(&model, &sup_head), snapshot(&model, &jig_head));
        training::unsupervised_step(&mut model, &mut opt, &samples, &weights, 1.5).unwrap();
        violations += usize::from(snapshot(&model, &sup_head) != s1);
        moved += usize::from(snapshot(&model, &jig_head) != u1);
    }
    check(
        violations == 0 && moved == 20,
        format!("{violations} cross-phase changes over 10 iterations; own head moved in {moved}/20 steps"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let start = Instant::now();
    for _ in 0..50 {
        let n = rng.gen_range(2..=200);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        let area = trapezoid_area(&roc_curve(&scores, &labels).unwrap());
        worst = worst.max((area - wins / pairs).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-9 && secs < 60.0,
        format!("max |trapezoid - pairwise| = {worst:.1e} over 50 sets in {secs:.2}s"),
    )
}

fn criterion_7(manifest: &DatasetManifest, images: &std::collections::HashMap<usize, Tensor>) -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml_str(&format!(
        "protocol = \"fraction-sweep\"\nk_percents = [100.0, 6.25]\nn_folds = 3\n{DESK_SCALE}"
    ))
    .map_err(|e| e.to_string())?;
    let report = run_fraction_sweep_on(&cfg, manifest, images).map_err(|e| e.to_string())?;
    let acc = |k: f64, arm: Arm| report.summary_for(k, arm).and_then(|r| r.stats[0].0).unwrap_or(f64::NAN);
    let (b_low, s_low) = (acc(6.25, Arm::Baseline), acc(6.25, Arm::Ssl));
    let (b_high, s_high) = (acc(100.0, Arm::Baseline), acc(100.0, Arm::Ssl));
    let (gap_low, gap_high) = (s_low - b_low, s_high - b_high);
    let secs = start.elapsed().as_secs_f64();
    check(
        report.failed_cells() == 0 && s_low >= b_low && gap_low >= gap_high - 0.02 && secs < 1800.0,
        format!(
            "median accuracy at 6.25%: SSL {:.2}% vs baseline {:.2}%; gap {:+.2} pts at 6.25% vs {:+.2} pts at 100%; {secs:.0}s",
            100.0 * s_low,
            100.0 * b_low,
            100.0 * gap_low,
            100.0 * gap_high
        ),
    )
}

fn criterion_8(manifest: &DatasetManifest, images: &std::collections::HashMap<usize, Tensor>) -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml_str(&format!("protocol = \"domain-adaptation\"\nseeds = [0, 1, 2]\n{DESK_SCALE}"))
        .map_err(|e| e.to_string())?;
    let report = run_domain_adaptation_on(&cfg, manifest, images).map_err(|e| e.to_string())?;
    let acc = |arm: Arm| report.summary_for(100.0, arm).and_then(|r| r.stats[0].0).unwrap_or(f64::NAN);
    let (b, s) = (acc(Arm::Baseline), acc(Arm::Ssl));
    let secs = start.elapsed().as_secs_f64();
    check(
        report.failed_cells() == 0 && s >= b && secs < 1200.0,
        format!(
            "mean NBI test accuracy over 3 seeds: SSL {:.2}% vs baseline {:.2}%; {secs:.0}s",
            100.0 * s,
            100.0 * b
        ),
    )
}

fn criterion_9(manifest: &DatasetManifest, images: &std::collections::HashMap<usize, Tensor>) -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml_str(&format!(
        "protocol = \"ood\"\nseeds = [0, 1, 2]\nood_train_baseline = false\n{DESK_SCALE}\n[ood]\nmode = \"scramble\"\nscrambles = 4\n"
    ))
    .map_err(|e| e.to_string())?;
    let report = run_ood_experiment_on(&cfg, manifest, images).map_err(|e| e.to_string())?;
    let ssl = report.median_ssl_auroc().unwrap_or(f64::NAN);
    let kl = report.median_kl_auroc().unwrap_or(f64::NAN);
    let secs = start.elapsed().as_secs_f64();
    check(
        report.failed_runs() == 0 && ssl > 0.55 && ssl > kl && secs < 600.0,
        format!("median AUROC over 3 runs: KL + jigsaw {ssl:.3} vs KL only {kl:.3}; {secs:.0}s"),
    )
}

fn criterion_10() -> Outcome {
    let cfg = TrainConfig {
        lambda: 1.5,
        lambda_ramp: true,
        lambda_ramp_factor: 1.5,
        lambda_ramp_period: 5,
        ..TrainConfig::default()
    };
    let schedule_ok = (0..=20).all(|e| lambda_at(e, &cfg) == 1.5 * 1.5f64.powi((e / 5) as i32));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let set = generate_permutation_set(3, 30, DEFAULT_POOL_SIZE, 0).unwrap();
    let spec = TileGridSpec {
        image_side: 12,
        ..TileGridSpec::default()
    };
    let images: Vec<Tensor> = (0..10).map(|_| random_image(&mut rng, 12)).collect();
    let mut wrong = 0;
    for _ in 0..1000 {
        let batch = compose_batch_unsupervised(&images, &set, &spec, 0.6, &mut rng).unwrap();
        wrong += usize::from(batch.iter().filter(|s| s.pseudo_label != 0).count() != 6);
    }
    // A single scrambled sample must never carry the identity label.
    let lone = make_jigsaw_sample(&images[0], &set, &spec, true, &mut rng).unwrap();
    check(
        schedule_ok && wrong == 0 && lone.pseudo_label != 0,
        format!(
            "schedule exact for epochs 0..=20: {schedule_ok}; {wrong} of 1000 batches without exactly 6 scrambled"
        ),
    )
}

fn run_sweep(bin: &str, config: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(bin)
        .args(["sweep", "--workers", "1", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("sweep exited with {status}"))
    }
}

fn criterion_11(dir: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_jigsaw");
    let data = dir.join("repro-data");
    let status = Command::new(bin)
        .args(["synth-data", "--videos", "40", "--frames", "3", "--side", "24", "--seed", "11", "--out"])
        .arg(&data)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("synth-data exited with {status}"));
    }
    let config = dir.join("repro.toml");
    std::fs::write(
        &config,
        format!(
            "protocol = \"fraction-sweep\"\nmanifest = {:?}\nk_percents = [100.0, 25.0]\nn_folds = 2\n\
             preset = \"default\"\n[train]\nimage_side = 24\nepochs = 2\nlearning_rate = 1e-3\npermutations = 10\n",
            data.join("manifest.csv")
        ),
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (dir.join("repro-a"), dir.join("repro-b"));
    run_sweep(bin, &config, &a)?;
    run_sweep(bin, &config, &b)?;
    let mut compared = Vec::new();
    let mut differing = Vec::new();
    for name in ["summary.csv", "cells.csv", "table.md", "report.json"] {
        let x = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        compared.push(name);
        if x != y {
            differing.push(name);
        }
    }
    check(
        differing.is_empty(),
        format!("compared {}; differing: {:?}", compared.join(", "), differing),
    )
}

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let dir = tempfile::tempdir().expect("temp dir");

    let needs_data = (7..=9).any(wanted);
    let data = needs_data.then(|| {
        let manifest = synthetic(&dir.path().join("synthetic"));
        let images = load_all_images(&manifest).expect("images");
        (manifest, images)
    });

    let mut failed = 0;
    for n in 1..=11 {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 | 8 | 9 => {
                let (m, i) = data.as_ref().unwrap();
                match n {
                    7 => criterion_7(m, i),
                    8 => criterion_8(m, i),
                    _ => criterion_9(m, i),
                }
            }
            10 => criterion_10(),
            _ => criterion_11(dir.path()),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2}: PASS  {detail}  [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2}: FAIL  {detail}  [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
