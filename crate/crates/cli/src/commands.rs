use std::path::{Path, PathBuf};

use anyhow::Context;
use xgans::checkpoint::{load_checkpoint, load_generator};
use xgans::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use xgans::dataset::{
    list_images, load_and_normalize, sample_stream, split_manifest, DatasetManifest, SampleStream, SpecSampler,
};
use xgans::evaluation::{ablate_point_loss, evaluate_grid, write_plots, EvalOptions, MetricsReport, PointVariant};
use xgans::image::{load_image, ImageTensor};
use xgans::perceptual::PerceptualSource;
use xgans::rng::mix;
use xgans::training::{reconstruct, train_loop, Trainer};
use xgans::Error;

use crate::config::{resolve_output, ExperimentConfig, EFFECTIVE_CONFIG_FILE};
use crate::{Cli, Command, CorruptArgs, EvaluateArgs, PlotArgs, ReconstructArgs, TrainArgs};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const DEFAULT_SWEEP: [f64; 5] = [0.01, 0.05, 0.10, 0.15, 0.20];

/// A failure with the process exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, error: anyhow::anyhow!(msg.into()) }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::IncompatibleCheckpoint { .. } => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Self { code, error: e.into() }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        match error.downcast::<Error>() {
            Ok(e) => e.into(),
            Err(error) => Self { code: EXIT_RUNTIME, error },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Corrupt(a) => cmd_corrupt(&a, seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(&a, seed),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Evaluate(a) => cmd_evaluate(&a, seed.unwrap_or(0), cli.workers),
        Command::Plot(a) => cmd_plot(&a),
    }
}

fn spec_from(kind: CorruptionKind, keep: Option<f64>, block: Option<usize>) -> CliResult<CorruptionSpec> {
    let spec = if kind.is_point_regime() {
        CorruptionSpec::points(kind, keep.ok_or_else(|| CliError::config(format!("--keep is required for {kind}")))?, 0)
    } else {
        CorruptionSpec::block(kind, block.ok_or_else(|| CliError::config(format!("--block is required for {kind}")))?, 0)
    };
    spec.validate()?;
    Ok(spec)
}

fn images_in(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::config(format!("{} is not a directory", dir.display())));
    }
    let images = list_images(dir)?;
    if images.is_empty() {
        return Err(CliError::config(format!("no PNG or JPEG images in {}", dir.display())));
    }
    Ok(images)
}

fn load_sized(path: &Path, size: Option<usize>) -> xgans::Result<ImageTensor> {
    match size {
        Some(s) => load_and_normalize(path, s),
        None => load_image(path),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_corrupt(args: &CorruptArgs, seed: u64) -> CliResult<()> {
    let kind = CorruptionKind::from(args.kind);
    let template = spec_from(kind, args.keep, args.block)?;
    let images = images_in(&args.input)?;
    let donors = match (kind.needs_donor(), &args.donor) {
        (true, Some(dir)) => images_in(dir)?.iter().map(|p| load_sized(p, args.size)).collect::<xgans::Result<Vec<_>>>()?,
        (true, None) => return Err(CliError::config(format!("{kind} needs --donor"))),
        (false, Some(_)) => return Err(CliError::config("--donor is only used by clutter_color_block")),
        (false, None) => Vec::new(),
    };
    let output = resolve_output(&args.output);
    for (i, path) in images.iter().enumerate() {
        let real = load_sized(path, args.size)?;
        let spec = template.with_seed(mix(seed, i as u64));
        let donor = (!donors.is_empty()).then(|| &donors[(mix(spec.seed, 0xd0) % donors.len() as u64) as usize]);
        let sample = corrupt(&real, &spec, donor).with_context(|| format!("corrupting {}", path.display()))?;
        sample.save(&output, &stem(path))?;
    }
    println!("wrote {} corrupted samples to {}", images.len(), output.display());
    Ok(())
}

/// Apply command-line overrides on top of the file configuration.
pub fn effective_config(args: &TrainArgs, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut c = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &args.train_dir {
        c.train_dir = Some(d.clone());
    }
    if let Some(d) = &args.donor_dir {
        c.donor_dir = Some(d.clone());
    }
    if let Some(d) = &args.out {
        c.out_dir = d.clone();
    }
    c.out_dir = resolve_output(&c.out_dir);
    let t = &mut c.train;
    if let Some(n) = args.max_iterations {
        t.max_iterations = Some(n);
        t.epochs = None;
    }
    if let Some(n) = args.epochs {
        t.epochs = Some(n);
        t.max_iterations = None;
    }
    if let Some(s) = seed {
        t.seed = s;
    }
    if let Some(v) = args.image_size {
        t.image_size = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = args.sample_every {
        t.sample_every = v;
    }
    if let Some(kind) = args.kind {
        let kind = CorruptionKind::from(kind);
        let spec = if kind.is_point_regime() {
            CorruptionSpec::points(kind, args.keep.unwrap_or(0.2), 0)
        } else {
            CorruptionSpec::block(kind, args.block.unwrap_or(t.image_size / 2), 0)
        };
        t.task = SpecSampler { templates: vec![spec], frozen: t.task.frozen };
    } else {
        for tpl in &mut t.task.templates {
            if let (Some(k), true) = (args.keep, tpl.kind.is_point_regime()) {
                tpl.keep_fraction = Some(k);
            }
            if let (Some(b), true) = (args.block, tpl.kind.is_block_regime()) {
                tpl.block_size = Some(b);
            }
        }
    }
    if args.frozen_corruption {
        t.task.frozen = true;
    }
    if let Some(w) = &args.perceptual_weights {
        t.perceptual = PerceptualSource::Vgg19 { weights: Some(w.clone()), allow_fallback: false };
    }
    Ok(c)
}

/// Training manifest and sample stream of an experiment.
pub fn build_stream(c: &ExperimentConfig) -> CliResult<(DatasetManifest, SampleStream)> {
    let train_dir = c.train_dir.as_ref().ok_or_else(|| CliError::config("train_dir is required"))?;
    let images = images_in(train_dir)?;
    let held_out = if c.val_dir.is_some() { 0 } else { c.val_count };
    let available = images.len().saturating_sub(held_out);
    let train_count = c.train_count.unwrap_or(available);
    let manifest = if held_out == 0 && train_count == images.len() {
        DatasetManifest::training_only(images, c.train.image_size)
    } else {
        split_manifest(&images, train_count, held_out, c.train.seed)?.with_target_size(c.train.image_size)
    };
    let donors = match &c.donor_dir {
        Some(d) => Some(DatasetManifest::training_only(images_in(d)?, c.train.image_size)),
        None => None,
    };
    let stream = sample_stream(manifest.clone(), c.train.task.clone(), donors.as_ref(), c.train.seed)?;
    Ok((manifest, stream))
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> CliResult<()> {
    let c = effective_config(args, seed)?;
    c.validate()?;
    std::fs::create_dir_all(&c.out_dir).map_err(|e| Error::io(&c.out_dir, e))?;
    c.save(&c.out_dir.join(EFFECTIVE_CONFIG_FILE))?;
    let (manifest, stream) = build_stream(&c)?;
    manifest.save(&c.out_dir.join("manifest.json"))?;
    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(c.train.clone(), load_checkpoint(p)?, p)?,
        None => Trainer::new(c.train.clone())?,
    };
    let outcome = train_loop(&mut trainer, &stream, &c.out_dir)?;
    println!("trained to iteration {}; checkpoint at {}", outcome.iterations, outcome.checkpoint.display());
    Ok(())
}

fn cmd_reconstruct(args: &ReconstructArgs) -> CliResult<()> {
    let (_, generator) = load_generator(&args.checkpoint)?;
    let inputs = if args.input.is_dir() {
        let all = images_in(&args.input)?;
        let sources: Vec<PathBuf> = all.iter().filter(|p| stem(p).ends_with("_source")).cloned().collect();
        if sources.is_empty() {
            all
        } else {
            sources
        }
    } else {
        vec![args.input.clone()]
    };
    let multiple = generator.config().size_multiple();
    for path in &inputs {
        let source = load_image(path)?;
        let (h, w) = source.dims();
        if h % multiple != 0 || w % multiple != 0 {
            return Err(CliError::config(format!(
                "{} is {w}x{h}; both sides must be multiples of {multiple} (crop or resize to {}x{})",
                path.display(),
                w / multiple * multiple,
                h / multiple * multiple
            )));
        }
        let recon = reconstruct(&generator, &source)?;
        let dir = match &args.output {
            Some(d) => resolve_output(d),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let name = stem(path);
        let out = match &args.output {
            Some(_) => dir.join(path.file_name().expect("image path has a file name")).with_extension("png"),
            None => dir.join(format!("{name}_recon.png")),
        };
        recon.save_png(&out)?;
        if args.dump_triptych {
            let base = name.strip_suffix("_source").unwrap_or(&name).to_string();
            let real_path = path.with_file_name(format!("{base}_real.png"));
            let strip = if real_path.is_file() {
                ImageTensor::hconcat(&[&source, &recon, &load_image(&real_path)?])?
            } else {
                log::warn!("no {} next to {}; triptych omits the real image", real_path.display(), path.display());
                ImageTensor::hconcat(&[&source, &recon])?
            };
            strip.save_png(&dir.join(format!("{base}_triptych.png")))?;
        }
    }
    println!("reconstructed {} image(s)", inputs.len());
    Ok(())
}

fn strategy_kind(name: &str) -> CliResult<CorruptionKind> {
    match name.trim() {
        "uniform" => Ok(CorruptionKind::UniformPointsWhite),
        "feature" => Ok(CorruptionKind::FeaturePointsWhite),
        "noise" => Ok(CorruptionKind::UniformPointsColorNoise),
        other => other.parse().map_err(|e: Error| CliError::config(e.to_string())),
    }
}

fn sweep_specs(args: &EvaluateArgs, size: usize) -> CliResult<Vec<CorruptionSpec>> {
    let kinds = if args.compare.is_empty() {
        vec![CorruptionKind::from(args.kind)]
    } else {
        args.compare.iter().map(|n| strategy_kind(n)).collect::<CliResult<Vec<_>>>()?
    };
    let keeps = if args.keep.is_empty() { DEFAULT_SWEEP.to_vec() } else { args.keep.clone() };
    let blocks = if args.block.is_empty() { vec![size / 2] } else { args.block.clone() };
    let mut specs = Vec::new();
    for kind in kinds {
        if kind.is_point_regime() {
            specs.extend(keeps.iter().map(|&k| CorruptionSpec::points(kind, k, 0)));
        } else {
            specs.extend(blocks.iter().map(|&b| CorruptionSpec::block(kind, b, 0)));
        }
    }
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

fn load_named(dir: &Path, size: usize) -> CliResult<Vec<(String, ImageTensor)>> {
    images_in(dir)?
        .iter()
        .map(|p| {
            let id = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, load_and_normalize(p, size)?))
        })
        .collect()
}

fn cmd_evaluate(args: &EvaluateArgs, seed: u64, workers: usize) -> CliResult<()> {
    let out = resolve_output(&args.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let options = EvalOptions { seed, region: args.region.into(), workers, ..EvalOptions::default() };
    if let Some(cfg_path) = &args.ablate_point_loss {
        let c = ExperimentConfig::load(cfg_path)?;
        c.validate()?;
        let size = args.size.unwrap_or(c.train.image_size);
        let images = load_named(&args.images, size)?;
        let specs = sweep_specs(args, size)?;
        let (_, stream) = build_stream(&c)?;
        let report = ablate_point_loss(&c.train, &stream, &PointVariant::ALL, &images, &specs, &options, &out)?;
        report.write_csv(&out.join("ablation.csv"))?;
        let named: Vec<(String, &MetricsReport)> = report.variants.iter().map(|(v, r)| (v.name().to_string(), r)).collect();
        write_plots(&named, &out, "ablation")?;
        for (v, r) in &report.variants {
            for a in r.aggregates() {
                println!("{:<5} {} {:<6} psnr {:.2} dB  ssim {:.4}", v.name(), a.kind, a.param, a.psnr_mean, a.ssim_mean);
            }
        }
        return Ok(());
    }
    let ckpt = args.checkpoint.as_ref().ok_or_else(|| CliError::config("--checkpoint is required"))?;
    let (manifest, generator) = load_generator(ckpt)?;
    let size = args.size.unwrap_or(manifest.config.image_size);
    let images = load_named(&args.images, size)?;
    let specs = sweep_specs(args, size)?;
    let donors = match &args.donor {
        Some(d) => images_in(d)?.iter().map(|p| load_and_normalize(p, size)).collect::<xgans::Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let mut report = evaluate_grid(&generator, &images, &specs, &donors, &options)?;
    report.meta.checkpoint = ckpt.display().to_string();
    report.meta.dataset = args.images.display().to_string();
    report.write_csv(&out.join("metrics.csv"))?;
    report.write_aggregates_csv(&out.join("aggregates.csv"))?;
    let meta_path = out.join("report.json");
    let meta = serde_json::json!({ "meta": report.meta, "aggregates": report.aggregates() });
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).context("serializing report")? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;
    write_plots(&[(String::new(), &report)], &out, "metrics")?;
    for a in report.aggregates() {
        println!("{} {:<6} psnr {:.2} ± {:.2} dB  ssim {:.4} ± {:.4}", a.kind, a.param, a.psnr_mean, a.psnr_std, a.ssim_mean, a.ssim_std);
    }
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> CliResult<()> {
    let keep: Vec<CorruptionKind> = args.compare.iter().map(|n| strategy_kind(n)).collect::<CliResult<_>>()?;
    let mut reports = Vec::new();
    for path in &args.metrics {
        let mut r = MetricsReport::read_csv(path)?;
        if !keep.is_empty() {
            r.rows.retain(|row| keep.contains(&row.kind));
        }
        if r.rows.is_empty() {
            return Err(CliError::config(format!("{} has no rows to plot", path.display())));
        }
        let name = if args.metrics.len() > 1 { stem(path) } else { String::new() };
        reports.push((name, r));
    }
    let named: Vec<(String, &MetricsReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    let out = resolve_output(&args.out);
    for p in write_plots(&named, &out, "metrics")? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
