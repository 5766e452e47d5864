//! One test per acceptance criterion. Each prints a `[PASS]`/`[FAIL]` line
//! straight to stdout so the verdicts show up even when output is captured.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xgans::corruption::{
    corrupt, feature_point_count, make_feature_mask, make_uniform_mask, sobel_edge_map, CorruptionKind, CorruptionSpec,
};
use xgans::dataset::{sample_stream, DatasetManifest, SpecSampler};
use xgans::discriminator::{build_discriminators, DiscriminatorConfig, ScaleFeatures};
use xgans::evaluation::{evaluate_grid, psnr, ssim, EvalOptions};
use xgans::generator::{build_generator, Generator, GeneratorConfig};
use xgans::image::{load_image, ImageTensor};
use xgans::losses::{
    adversarial_losses, corresponding_point_loss, corresponding_point_loss_value, feature_matching_loss,
    perceptual_loss, AdversarialMode, DAggregation, LossBreakdown, LossWeights,
};
use xgans::perceptual::{build_extractor, FeatureExtractor, PerceptualSource, RandomConvFeatures};
use xgans::scenes::{scene, step_edge};
use xgans::training::{train_loop, TrainConfig, Trainer};
use xgans_nn::gradcheck::{check_input, GradComparison};
use xgans_nn::{Graph, Shape, Tensor, Var};

fn verdict(n: u32, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] criterion {n}: {detail}");
    let _ = out.flush();
    assert!(pass, "criterion {n}: {detail}");
}

fn random(shape: Shape, seed: u64, scale: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn random_image(size: usize, seed: u64) -> ImageTensor {
    ImageTensor::from_tensor(&random(Shape::new(1, 3, size, size), seed, 1.0), 0).unwrap()
}

fn fixture(name: &str) -> ImageTensor {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    load_image(&dir.join(name)).unwrap()
}

fn nn(e: xgans::Error) -> xgans_nn::NnError {
    xgans_nn::NnError::InvalidArgument(e.to_string())
}

// ---- criterion 1 ----

#[test]
fn criterion_1_loss_identities() {
    const TOL: f64 = 1e-6;
    let mut worst = 0.0f64;
    let bank = build_discriminators(DiscriminatorConfig::default(), 3).unwrap();
    let random_conv = RandomConvFeatures::new(4);
    let fallback = build_extractor(&PerceptualSource::default()).unwrap();
    for seed in 0..3 {
        let real = random_image(64, seed);
        let source = random_image(64, seed + 100);
        let mut g = Graph::new();
        g.set_param_grads(false);
        let s = g.input(source.to_tensor());
        let x = g.input(real.to_tensor());
        let y = g.input(real.to_tensor());
        let fx = bank.forward(&mut g, s, x).unwrap();
        let fy = bank.forward(&mut g, s, y).unwrap();
        let fm = feature_matching_loss(&mut g, &fx, &fy).unwrap();
        let vgg = perceptual_loss(&mut g, x, y, &random_conv, 10.0).unwrap();
        let vgg_default = perceptual_loss(&mut g, x, y, fallback.as_ref(), 10.0).unwrap();
        for v in [fm, vgg, vgg_default] {
            worst = worst.max((g.scalar(v) as f64).abs());
        }
        let sample = corrupt(&real, &CorruptionSpec::points(CorruptionKind::UniformPointsWhite, 0.2, seed), None).unwrap();
        let mut generated = random_image(64, seed + 200);
        for y in 0..64 {
            for x in 0..64 {
                if sample.mask.get(y, x) {
                    generated.set_pixel(y, x, sample.source.pixel(y, x));
                }
            }
        }
        worst = worst.max(corresponding_point_loss_value(&sample, &generated).unwrap().abs());
    }
    verdict(1, worst <= TOL, format!("largest fm/vgg/point value on identical inputs {worst:.2e} (tolerance {TOL:.0e})"));
}

// ---- criterion 2 ----

const GRAD_EPS: f32 = 1e-2;

/// Returns the image itself as the only feature layer.
struct Identity;

impl FeatureExtractor for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, _g: &mut Graph, image: Var) -> xgans::Result<Vec<Var>> {
        Ok(vec![image])
    }
}

/// Parameter-free three-scale stand-in for the discriminator bank: the
/// concatenated pair and its leaky ReLU at full, half and quarter size.
fn pooled_features(g: &mut Graph, source: Var, x: Var) -> xgans_nn::Result<Vec<ScaleFeatures>> {
    let mut h = g.concat_channels(source, x)?;
    let mut out = Vec::new();
    for k in 0..3 {
        if k > 0 {
            h = g.avg_pool2(h)?;
        }
        let a = g.leaky_relu(h, 0.2);
        out.push(ScaleFeatures { features: vec![a], logits: h });
    }
    Ok(out)
}

/// `reference` moved by [0.1, 0.6] in a random direction, away from every L1 kink.
fn offset_from(reference: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = reference.data();
    Tensor::from_fn(reference.shape(), |i| {
        let d = rng.random_range(0.1f32..0.6);
        if rng.random_bool(0.5) { data[i] + d } else { data[i] - d }
    })
}

fn positive(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.1..1.0))
}

#[test]
fn criterion_2_gradient_oracle() {
    const TOL: f64 = 1e-2;
    let probe = Shape::new(2, 3, 8, 8);
    let mut results: Vec<(&str, GradComparison)> = Vec::new();

    let source = random(probe, 1, 1.0);
    let x = offset_from(&source, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask = Arc::new(Tensor::from_fn(Shape::new(2, 1, 8, 8), |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }));
    let weights = LossWeights::default();
    let point = check_input(
        &x,
        |g, v| {
            let s = g.input(source.clone());
            corresponding_point_loss(g, s, v, mask.clone(), &weights).map_err(nn)
        },
        GRAD_EPS,
        200,
        4,
    )
    .unwrap();
    results.push(("point", point));

    let real = positive(probe, 5);
    let fake = real.map(|v| v + 0.3);
    let fm = check_input(
        &fake,
        |g, v| {
            let s = g.input(source.clone());
            let r = g.input(real.clone());
            let fr = pooled_features(g, s, r)?;
            let ff = pooled_features(g, s, v)?;
            feature_matching_loss(g, &fr, &ff).map_err(nn)
        },
        GRAD_EPS,
        200,
        6,
    )
    .unwrap();
    results.push(("feature matching", fm));

    let real_img = random(probe, 7, 1.0);
    let vgg_probe = offset_from(&real_img, 8);
    let vgg = check_input(
        &vgg_probe,
        |g, v| {
            let r = g.input(real_img.clone());
            perceptual_loss(g, r, v, &Identity, 10.0).map_err(nn)
        },
        GRAD_EPS,
        200,
        9,
    )
    .unwrap();
    results.push(("perceptual", vgg));

    let adv_source = random(probe, 10, 1.0);
    let adv_real = random(probe, 11, 1.0);
    let adv_fake = random(probe, 12, 1.0);
    for (name, mode, agg) in [
        ("adversarial G (log, sum)", AdversarialMode::VanillaLog, DAggregation::Sum),
        ("adversarial G (log, max)", AdversarialMode::VanillaLog, DAggregation::Max),
        ("adversarial G (least squares)", AdversarialMode::LeastSquares, DAggregation::Sum),
    ] {
        let cmp = check_input(
            &adv_fake,
            |g, v| {
                let s = g.input(adv_source.clone());
                let r = g.input(adv_real.clone());
                let fr = pooled_features(g, s, r)?;
                let ff = pooled_features(g, s, v)?;
                let rl: Vec<Var> = fr.iter().map(|f| f.logits).collect();
                let fl: Vec<Var> = ff.iter().map(|f| f.logits).collect();
                let (_, adv_g) = adversarial_losses(g, &rl, &fl, mode, agg).map_err(nn)?;
                Ok(adv_g)
            },
            GRAD_EPS,
            200,
            13,
        )
        .unwrap();
        results.push((name, cmp));
    }

    let pass = results.iter().all(|(_, c)| c.len() >= 100 && c.relative_error() < TOL);
    let detail: Vec<String> =
        results.iter().map(|(n, c)| format!("{n} {:.1e} over {}", c.relative_error(), c.len())).collect();
    verdict(2, pass, format!("relative errors (< {TOL:.0e}): {}", detail.join(", ")));
}

// ---- criterion 3 ----

#[test]
fn criterion_3_mask_statistics() {
    const SIDE: usize = 256;
    let mut worst_uniform = 0.0f64;
    for keep in [0.01, 0.05, 0.10, 0.20, 0.50] {
        let total: usize = (0..20).map(|seed| make_uniform_mask(SIDE, SIDE, keep, seed).unwrap().kept_count()).sum();
        let fraction = total as f64 / (20 * SIDE * SIDE) as f64;
        worst_uniform = worst_uniform.max((fraction - keep).abs());
    }
    let mut exact = true;
    let photo = fixture("astronaut.png");
    for keep in [0.01, 0.05, 0.10, 0.20] {
        for seed in 0..5 {
            let (h, w) = photo.dims();
            let expected = (keep * (h * w) as f64).round() as usize;
            let got = make_feature_mask(&photo, keep, seed).unwrap().kept_count();
            exact &= got == expected && feature_point_count(h, w, keep) == expected;
        }
    }
    verdict(
        3,
        worst_uniform <= 0.01 && exact,
        format!("uniform keep deviation {worst_uniform:.4} (≤ 0.01); feature counts exact: {exact}"),
    );
}

// ---- criterion 4 ----

fn concentration(image: &ImageTensor, keep: f64, seeds: u64) -> f64 {
    let edges = sobel_edge_map(image);
    let (h, w) = image.dims();
    let mut feature = 0.0;
    let mut uniform = 0.0;
    for seed in 0..seeds {
        feature += edges.mean_over(&make_feature_mask(image, keep, seed).unwrap());
        uniform += edges.mean_over(&make_uniform_mask(h, w, keep, seed + 1000).unwrap());
    }
    feature / uniform
}

#[test]
fn criterion_4_feature_mask_concentration() {
    let ratios = [
        ("step edge", concentration(&step_edge(64), 0.05, 10)),
        ("astronaut photo", concentration(&fixture("astronaut.png"), 0.05, 10)),
        ("coffee photo", concentration(&fixture("coffee.png"), 0.05, 10)),
    ];
    let pass = ratios.iter().all(|(_, r)| *r >= 1.5);
    let detail: Vec<String> = ratios.iter().map(|(n, r)| format!("{n} {r:.2}x")).collect();
    verdict(4, pass, format!("kept/uniform mean Sobel magnitude (≥ 1.5x): {}", detail.join(", ")));
}

// ---- criterion 5 ----

#[test]
fn criterion_5_point_loss_mask_locality() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut exact = true;
    let mut trials = 0;
    for kind in [CorruptionKind::UniformPointsWhite, CorruptionKind::FeaturePointsWhite, CorruptionKind::CenterWhiteBlock] {
        for seed in 0..10 {
            let real = random_image(32, seed);
            let spec = if kind.is_point_regime() {
                CorruptionSpec::points(kind, rng.random_range(0.01..0.9), seed)
            } else {
                CorruptionSpec::block(kind, 12, seed)
            };
            let sample = corrupt(&real, &spec, None).unwrap();
            let generated = random_image(32, seed + 500);
            let base = corresponding_point_loss_value(&sample, &generated).unwrap();
            let mut perturbed = generated.clone();
            for y in 0..32 {
                for x in 0..32 {
                    if !sample.mask.get(y, x) {
                        let v = [0; 3].map(|_| rng.random_range(-1e3f32..1e3));
                        perturbed.set_pixel(y, x, v);
                    }
                }
            }
            exact &= corresponding_point_loss_value(&sample, &perturbed).unwrap() == base;
            trials += 1;
        }
    }
    verdict(5, exact, format!("point loss unchanged bit-for-bit in {trials} perturbation trials: {exact}"));
}

// ---- criterion 6 ----

#[test]
fn criterion_6_architecture_shapes() {
    let generator = build_generator(GeneratorConfig::default(), 0).unwrap();
    let bank = build_discriminators(DiscriminatorConfig::default(), 0).unwrap();
    let layers = bank.config().layers;
    let mut problems = Vec::new();
    for n in [64, 128, 256] {
        let x = random(Shape::new(1, 3, n, n), n as u64, 1.0);
        let y = generator.infer(&x).unwrap();
        if y.shape() != Shape::new(1, 3, n, n) || !y.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
            problems.push(format!("generator at {n}"));
        }
        let mut g = Graph::new();
        g.set_param_grads(false);
        let s = g.input(x.clone());
        let c = g.input(y.clone());
        let feats = bank.forward(&mut g, s, c).unwrap();
        if feats.len() != 3 {
            problems.push(format!("{} scales at {n}", feats.len()));
        }
        // scale k must see the pair pooled k times: N, N/2, N/4
        let mut pair = g.concat_channels(s, c).unwrap();
        for (k, f) in feats.iter().enumerate() {
            if k > 0 {
                pair = g.avg_pool2(pair).unwrap();
            }
            if g.shape(pair).h != n >> k || f.features.len() != layers {
                problems.push(format!("scale {k} at {n}"));
            }
            let direct = bank.nets()[k].forward(&mut g, pair).unwrap();
            if g.value(direct.logits) != g.value(f.logits) {
                problems.push(format!("scale {k} input at {n}"));
            }
        }
    }
    let detail = if problems.is_empty() {
        format!("G keeps N×N×3 in [-1,1] for N = 64, 128, 256; 3 scales × {layers} layers on N, N/2, N/4")
    } else {
        format!("violations: {}", problems.join(", "))
    };
    verdict(6, problems.is_empty(), detail);
}

// ---- criterion 7 ----

fn reference_psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((*x as f64 - *y as f64) / 2.0).powi(2)).sum::<f64>()
        / a.data().len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Mean SSIM over 11×11 Gaussian (σ = 1.5) windows fully inside the image,
/// on BT.601 luma in [0, 1].
fn reference_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (h, w) = a.dims();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut weights = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (dy, row) in weights.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let r2 = ((dy as f64 - 5.0).powi(2) + (dx as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *v = (-r2).exp();
            total += *v;
        }
    }
    let luma = |img: &ImageTensor, y: usize, x: usize| {
        let p = img.pixel(y, x).map(|v| (v as f64 + 1.0) / 2.0);
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    };
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let k = weights[dy][dx] / total;
                    let (p, q) = (luma(a, y + dy, x + dx), luma(b, y + dy, x + dx));
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn criterion_7_metric_oracles() {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for i in 0..50 {
        let side = rng.random_range(11..24);
        let a = random_image(side, 1000 + i);
        let noise = random_image(side, 2000 + i);
        let amp = rng.random_range(0.01f32..0.5);
        let b = ImageTensor::from_fn(side, side, |y, x| {
            let (p, n) = (a.pixel(y, x), noise.pixel(y, x));
            [0, 1, 2].map(|c| (p[c] + amp * n[c]).clamp(-1.0, 1.0))
        });
        worst = worst.max((psnr(&a, &b).unwrap() - reference_psnr(&a, &b)).abs());
        worst = worst.max((ssim(&a, &b).unwrap() - reference_ssim(&a, &b)).abs());
    }
    let x = random_image(32, 5);
    let self_ssim = ssim(&x, &x).unwrap();
    // 0.1 in [0, 1] space is 0.2 in model space; MSE 0.01
    let base = ImageTensor::from_fn(16, 16, |y, x| [((y * 16 + x) as f32 / 256.0) - 0.9; 3]);
    let shifted = ImageTensor::from_fn(16, 16, |y, x| base.pixel(y, x).map(|v| v + 0.2));
    let twenty = psnr(&base, &shifted).unwrap();
    let pass = worst <= 1e-6 && self_ssim == 1.0 && (twenty - 20.0).abs() <= 1e-4;
    verdict(
        7,
        pass,
        format!("max deviation from direct formulas {worst:.1e} over 50 pairs; ssim(x,x) = {self_ssim}; offset psnr {twenty:.6} dB"),
    );
}

// ---- criteria 8 and 9 ----

const OVERFIT_IMAGES: u64 = 16;
const OVERFIT_SIZE: usize = 64;
const OVERFIT_ITERATIONS: u64 = 2000;
const OVERFIT_KEEP: f64 = 0.20;

struct Overfit {
    generator: Generator,
    images: Vec<(String, ImageTensor)>,
    elapsed: Duration,
}

fn overfit_model() -> &'static Overfit {
    static MODEL: OnceLock<Overfit> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<(String, ImageTensor)> =
            (0..OVERFIT_IMAGES).map(|i| (format!("scene_{i:02}.png"), scene(OVERFIT_SIZE, i))).collect();
        let paths: Vec<PathBuf> = images
            .iter()
            .map(|(name, img)| {
                let p = dir.path().join(name);
                img.save_png(&p).unwrap();
                p
            })
            .collect();
        let task = SpecSampler::single(CorruptionSpec::points(CorruptionKind::UniformPointsWhite, OVERFIT_KEEP, 0));
        let config = TrainConfig {
            image_size: OVERFIT_SIZE,
            max_iterations: Some(OVERFIT_ITERATIONS),
            checkpoint_every: 0,
            sample_every: 0,
            task: task.clone(),
            ..TrainConfig::default()
        };
        let data = sample_stream(DatasetManifest::training_only(paths, OVERFIT_SIZE), task, None, config.seed).unwrap();
        let start = Instant::now();
        let mut trainer = Trainer::new(config).unwrap();
        train_loop(&mut trainer, &data, &dir.path().join("run")).unwrap();
        let elapsed = start.elapsed();
        // reload from disk so the files round-trip
        let images = images.into_iter().map(|(n, _)| {
            let img = load_image(&dir.path().join(&n)).unwrap();
            (n, img)
        });
        Overfit { generator: trainer.generator().clone(), images: images.collect(), elapsed }
    })
}

#[test]
fn criterion_8_overfit_sanity() {
    let model = overfit_model();
    let spec = CorruptionSpec::points(CorruptionKind::UniformPointsWhite, OVERFIT_KEEP, 0);
    let mut psnr_sum = 0.0;
    let mut point_sum = 0.0;
    for (i, (_, real)) in model.images.iter().enumerate() {
        let sample = corrupt(real, &spec.with_seed(10_000 + i as u64), None).unwrap();
        let recon = xgans::training::reconstruct(&model.generator, &sample.source).unwrap();
        psnr_sum += psnr(&recon, real).unwrap();
        point_sum += corresponding_point_loss_value(&sample, &recon).unwrap();
    }
    let n = model.images.len() as f64;
    let (mean_psnr, mean_point) = (psnr_sum / n, point_sum / n);
    let minutes = model.elapsed.as_secs_f64() / 60.0;
    verdict(
        8,
        mean_psnr >= 22.0 && mean_point < 0.01 && minutes <= 30.0,
        format!(
            "{OVERFIT_ITERATIONS} iterations in {minutes:.1} min; mean training-set PSNR {mean_psnr:.2} dB (≥ 22), point loss {mean_point:.4} (< 0.01)"
        ),
    );
}

#[test]
fn criterion_9_psnr_rises_with_keep_fraction() {
    let model = overfit_model();
    let specs: Vec<CorruptionSpec> = [0.05, 0.10, 0.20]
        .iter()
        .map(|&k| CorruptionSpec::points(CorruptionKind::UniformPointsWhite, k, 0))
        .collect();
    let report = evaluate_grid(&model.generator, &model.images, &specs, &[], &EvalOptions::default()).unwrap();
    let means: Vec<f64> = report.aggregates().iter().map(|a| a.psnr_mean).collect();
    let pass = means.len() == 3 && means.windows(2).all(|w| w[1] >= w[0]);
    verdict(9, pass, format!("mean PSNR at keep 5%/10%/20%: {:.2} / {:.2} / {:.2} dB", means[0], means[1], means[2]));
}

// ---- criterion 10 ----

fn corrupt_files(input: &Path, output: &Path) -> Vec<(String, Vec<u8>)> {
    let status = Command::new(env!("CARGO_BIN_EXE_xgans"))
        .args(["corrupt", "--kind", "feature-points-white", "--keep", "0.05", "--seed", "7", "--input"])
        .arg(input)
        .arg("--output")
        .arg(output)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    let mut files: Vec<_> = std::fs::read_dir(output)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn ten_steps(dir: &Path, data: &xgans::dataset::SampleStream, name: &str) -> Vec<LossBreakdown> {
    let config = TrainConfig {
        image_size: 64,
        max_iterations: Some(10),
        checkpoint_every: 0,
        sample_every: 0,
        seed: 11,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config).unwrap();
    train_loop(&mut trainer, data, &dir.join(name)).unwrap().losses
}

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("images");
    std::fs::create_dir_all(&input).unwrap();
    let mut paths = Vec::new();
    for i in 0..4 {
        let p = input.join(format!("img_{i}.png"));
        scene(64, 300 + i).save_png(&p).unwrap();
        paths.push(p);
    }
    let first = corrupt_files(&input, &dir.path().join("a"));
    let second = corrupt_files(&input, &dir.path().join("b"));
    let corrupt_identical = first.len() == 16 && first == second;

    let task = TrainConfig::default().task;
    let data = sample_stream(DatasetManifest::training_only(paths, 64), task, None, 11).unwrap();
    let a = ten_steps(dir.path(), &data, "run_a");
    let b = ten_steps(dir.path(), &data, "run_b");
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        for ((_, u), (_, v)) in x.components().iter().zip(y.components()) {
            let scale = u.abs().max(v.abs());
            if scale > 0.0 {
                worst = worst.max((u - v).abs() / scale);
            }
        }
    }
    let pass = corrupt_identical && a.len() == 10 && b.len() == 10 && worst <= 1e-5;
    verdict(
        10,
        pass,
        format!("corrupt outputs bit-identical: {corrupt_identical}; largest relative loss difference over 10 steps {worst:.1e} (≤ 1e-5)"),
    );
}
