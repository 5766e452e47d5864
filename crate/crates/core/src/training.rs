//! Alternating discriminator/generator optimization, the training loop and
//! its loss log.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xgans_nn::{Adam, AdamConfig, Graph, Tensor};

use crate::checkpoint::{self, Checkpoint, CheckpointManifest};
use crate::corruption::{CorruptedSample, CorruptionKind, CorruptionSpec};
use crate::dataset::{SampleStream, SpecSampler};
use crate::discriminator::{build_discriminators, DiscriminatorBank, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{build_generator, Generator, GeneratorConfig, Mode};
use crate::image::ImageTensor;
use crate::losses::{self, GeneratorTerms, LossBreakdown, LossWeights};
use crate::perceptual::{build_extractor, FeatureExtractor, PerceptualSource};
use crate::rng::mix;

pub const LOSS_LOG: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const SAMPLE_DIR: &str = "samples";

const SEED_GENERATOR: u64 = 1;
const SEED_DISCRIMINATOR: u64 = 2;
const SEED_DROPOUT: u64 = 3;

/// Rough single-core seconds per iteration for one 64×64 sample.
const SECONDS_PER_SAMPLE_64: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub batch_size: usize,
    /// Exactly one of `max_iterations` and `epochs` must be set.
    pub max_iterations: Option<u64>,
    pub epochs: Option<u64>,
    pub seed: u64,
    /// 0 saves only the initial and final checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables sample grids.
    pub sample_every: u64,
    pub image_size: usize,
    /// Linear decay of the learning rate to zero, starting at this iteration.
    pub lr_decay_start: Option<u64>,
    pub weights: LossWeights,
    pub task: SpecSampler,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub perceptual: PerceptualSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            max_iterations: Some(100_000),
            epochs: None,
            seed: 0,
            checkpoint_every: 1000,
            sample_every: 500,
            image_size: 256,
            lr_decay_start: None,
            weights: LossWeights::default(),
            task: SpecSampler::single(CorruptionSpec::points(CorruptionKind::UniformPointsWhite, 0.2, 0)),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            perceptual: PerceptualSource::default(),
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        match (self.max_iterations, self.epochs) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => out.push("exactly one of max_iterations and epochs must be set".into()),
        }
        let multiple = self.generator.size_multiple().max(4);
        let min = self.discriminator.min_input_side();
        if self.image_size % multiple != 0 || self.image_size < min {
            out.push(format!("image_size {} must be a multiple of {multiple} and at least {min}", self.image_size));
        }
        for check in [
            self.weights.validate(),
            self.task.validate(),
            self.generator.validate(),
            self.discriminator.validate(),
        ] {
            if let Err(e) = check {
                out.push(e.to_string());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, ..AdamConfig::default() }
    }

    /// Iterations needed for a training set of `dataset_len` images.
    pub fn total_iterations(&self, dataset_len: usize) -> u64 {
        match (self.max_iterations, self.epochs) {
            (Some(n), _) => n,
            (None, Some(e)) => (e * dataset_len as u64).div_ceil(self.batch_size.max(1) as u64),
            (None, None) => 0,
        }
    }

    /// Crude single-core wall-clock estimate.
    pub fn estimated_cpu_hours(&self, dataset_len: usize) -> f64 {
        let area = (self.image_size as f64 / 64.0).powi(2);
        self.total_iterations(dataset_len) as f64 * self.batch_size as f64 * area * SECONDS_PER_SAMPLE_64 / 3600.0
    }

    pub fn is_multi_day(&self, dataset_len: usize) -> bool {
        self.estimated_cpu_hours(dataset_len) > 24.0
    }

    /// Point loss applies only when enabled and every task regime supports it.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            point_loss_enabled: self.weights.point_loss_enabled && self.task.supports_point_loss(),
            ..self.weights.clone()
        }
    }

    fn learning_rate_at(&self, iteration: u64, total: u64) -> f32 {
        match self.lr_decay_start {
            Some(start) if iteration >= start && total > start => {
                let remaining = (total - iteration) as f32 / (total - start) as f32;
                self.learning_rate * remaining.max(0.0)
            }
            _ => self.learning_rate,
        }
    }
}

/// Generator, discriminator bank, frozen feature extractor and both optimizers.
pub struct Trainer {
    config: TrainConfig,
    generator: Generator,
    discriminators: DiscriminatorBank,
    extractor: Box<dyn FeatureExtractor>,
    opt_g: Adam,
    opt_d: Adam,
    iteration: u64,
    freeze_discriminator: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = build_generator(config.generator, mix(config.seed, SEED_GENERATOR))?;
        let discriminators = build_discriminators(config.discriminator, mix(config.seed, SEED_DISCRIMINATOR))?;
        let extractor = build_extractor(&config.perceptual)?;
        Ok(Self {
            opt_g: Adam::new(config.adam()),
            opt_d: Adam::new(config.adam()),
            config,
            generator,
            discriminators,
            extractor,
            iteration: 0,
            freeze_discriminator: false,
        })
    }

    /// Continue from `ckpt` under `config`. Architecture changes are refused;
    /// any other difference is logged and `config` wins.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint, path: &Path) -> Result<Self> {
        config.validate()?;
        let m = &ckpt.manifest;
        let arch_old = (m.config.generator, m.config.discriminator);
        if arch_old != (config.generator, config.discriminator) {
            let diff = checkpoint::config_diff(&m.config, &config)?;
            return Err(Error::IncompatibleCheckpoint { path: path.into(), diff });
        }
        if m.config.weights != config.weights {
            log::warn!("checkpoint was trained with different loss weights; continuing with the new ones");
        }
        let diff = checkpoint::config_diff(&m.config, &config)?;
        if !diff.is_empty() {
            log::info!("configuration differs from the checkpoint:\n{diff}");
        }
        let mut opt_g = Adam::new(config.adam());
        let mut opt_d = Adam::new(config.adam());
        opt_g.load_state(ckpt.opt_g_steps, &ckpt.opt_g)?;
        opt_d.load_state(ckpt.opt_d_steps, &ckpt.opt_d)?;
        Ok(Self {
            extractor: build_extractor(&config.perceptual)?,
            iteration: m.iteration,
            config,
            generator: ckpt.generator,
            discriminators: ckpt.discriminators,
            opt_g,
            opt_d,
            freeze_discriminator: false,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminators(&self) -> &DiscriminatorBank {
        &self.discriminators
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn optimizer_steps(&self) -> (u64, u64) {
        (self.opt_d.steps(), self.opt_g.steps())
    }

    /// Skip discriminator updates (its loss is still reported).
    pub fn set_discriminator_frozen(&mut self, frozen: bool) {
        self.freeze_discriminator = frozen;
    }

    pub fn set_weights(&mut self, weights: LossWeights) {
        self.config.weights = weights;
    }

    /// One discriminator update on the detached reconstruction, then one
    /// generator update against the updated discriminator. Returns the loss
    /// values measured during the step and advances the iteration counter.
    pub fn train_step(&mut self, batch: &[CorruptedSample]) -> Result<LossBreakdown> {
        let iteration = self.iteration + 1;
        let with_iteration = |e: Error| match e {
            Error::NumericFailure { component, .. } => Error::NumericFailure { component, iteration },
            other => other,
        };
        let (source, real, mask) = stack_batch(batch)?;
        let weights = self.config.effective_weights();
        let mode = weights.adversarial_mode;

        let mut gg = Graph::new();
        let s = gg.input(source.clone());
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix(mix(self.config.seed, SEED_DROPOUT), iteration));
        let fake = self.generator.forward(&mut gg, s, Mode::Train(&mut dropout_rng))?;

        // discriminator: real pair vs detached fake pair
        let mut gd = Graph::new();
        let ds = gd.input(source);
        let dr = gd.input(real.clone());
        let df = gd.input(gg.value(fake).clone());
        let real_out = self.discriminators.forward(&mut gd, ds, dr)?;
        let fake_out = self.discriminators.forward(&mut gd, ds, df)?;
        let rl: Vec<_> = real_out.iter().map(|f| f.logits).collect();
        let fl: Vec<_> = fake_out.iter().map(|f| f.logits).collect();
        let per_scale = losses::discriminator_losses(&mut gd, &rl, &fl, mode)?;
        let d_loss = gd.sum(&per_scale)?;
        let adv_d = gd.scalar(d_loss) as f64;
        if !adv_d.is_finite() {
            return Err(Error::NumericFailure { component: "adv_d".into(), iteration });
        }
        if !self.freeze_discriminator {
            let grads = gd.backward(d_loss)?;
            self.opt_d.step(&mut self.discriminators, &grads)?;
        }
        drop(gd);

        // generator: discriminator and extractor frozen
        gg.set_param_grads(false);
        let x = gg.input(real);
        let real_feats = self.discriminators.forward(&mut gg, s, x)?;
        let fake_feats = self.discriminators.forward(&mut gg, s, fake)?;
        let fl: Vec<_> = fake_feats.iter().map(|f| f.logits).collect();
        let per_scale = losses::generator_adversarial_losses(&mut gg, &fl, mode)?;
        let adv_g = losses::aggregate(&mut gg, &per_scale, weights.d_aggregation)?;
        let fm = losses::feature_matching_loss(&mut gg, &real_feats, &fake_feats)?;
        let vgg = losses::perceptual_loss(&mut gg, x, fake, self.extractor.as_ref(), 1.0)?;
        let point = losses::corresponding_point_loss(&mut gg, s, fake, Arc::new(mask), &weights)?;
        let terms = GeneratorTerms { adv_g, fm, vgg, point: Some(point) };
        let (total, mut breakdown) = losses::total_generator_objective(&mut gg, terms, &weights).map_err(with_iteration)?;
        let grads = gg.backward(total)?;
        self.opt_g.step(&mut self.generator, &grads)?;

        breakdown.adv_d = adv_d;
        self.iteration = iteration;
        Ok(breakdown)
    }

    /// Eval-mode reconstruction of one corrupted source.
    pub fn reconstruct(&self, source: &ImageTensor) -> Result<ImageTensor> {
        reconstruct(&self.generator, source)
    }

    pub fn checkpoint_manifest(&self) -> CheckpointManifest {
        CheckpointManifest::new(self.iteration, self.config.clone())
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::save_checkpoint(
            dir,
            &self.checkpoint_manifest(),
            &self.generator,
            &self.discriminators,
            (&self.opt_g, &self.opt_d),
        )
    }

    fn set_learning_rate(&mut self, lr: f32) {
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
    }
}

pub fn reconstruct(generator: &Generator, source: &ImageTensor) -> Result<ImageTensor> {
    let out = generator.infer(&source.to_tensor())?;
    ImageTensor::from_tensor(&out, 0)
}

fn stack_batch(batch: &[CorruptedSample]) -> Result<(Tensor, Tensor, Tensor)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let sources: Vec<&ImageTensor> = batch.iter().map(|s| &s.source).collect();
    let reals: Vec<&ImageTensor> = batch.iter().map(|s| &s.real).collect();
    let masks: Vec<Tensor> = batch.iter().map(|s| s.mask.to_tensor()).collect();
    let mask_refs: Vec<&Tensor> = masks.iter().collect();
    Ok((ImageTensor::batch_tensor(&sources)?, ImageTensor::batch_tensor(&reals)?, Tensor::stack(&mask_refs)?))
}

/// One row of `losses.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub fm: f64,
    pub vgg: f64,
    pub point: f64,
    pub total_g: f64,
}

impl LossRow {
    pub fn new(iteration: u64, b: &LossBreakdown) -> Self {
        Self { iteration, adv_d: b.adv_d, adv_g: b.adv_g, fm: b.fm, vgg: b.vgg, point: b.point, total_g: b.total_g }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown { adv_d: self.adv_d, adv_g: self.adv_g, fm: self.fm, vgg: self.vgg, point: self.point, total_g: self.total_g }
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Keep rows up to and including `iteration`, creating the file if needed.
fn prepare_loss_log(path: &Path, iteration: u64) -> Result<()> {
    let rows = if path.exists() { read_loss_log(path)? } else { Vec::new() };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["iteration", "adv_d", "adv_g", "fm", "vgg", "point", "total_g"])?;
    for row in rows.into_iter().filter(|r| r.iteration <= iteration) {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// What a finished [`train_loop`] produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub iterations: u64,
    pub losses: Vec<LossBreakdown>,
}

/// Train until the configured termination, writing `losses.csv`, the
/// `checkpoint/` directory and sample triptychs under `out_dir`.
pub fn train_loop(trainer: &mut Trainer, data: &SampleStream, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config = trainer.config.clone();
    let total = config.total_iterations(data.len());
    if config.is_multi_day(data.len()) {
        log::warn!(
            "this run is estimated at {:.0} CPU hours ({total} iterations at {}x{}); expect several days",
            config.estimated_cpu_hours(data.len()),
            config.image_size,
            config.image_size
        );
    }
    let log_path = out_dir.join(LOSS_LOG);
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    prepare_loss_log(&log_path, trainer.iteration)?;
    if trainer.iteration == 0 {
        trainer.save_checkpoint(&ckpt_dir)?;
    }
    let file = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log_writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let mut losses = Vec::new();
    let batch_size = config.batch_size as u64;
    let n = data.len() as u64;
    while trainer.iteration < total {
        let it = trainer.iteration;
        trainer.set_learning_rate(config.learning_rate_at(it, total));
        let batch = (0..batch_size)
            .map(|b| {
                let k = it * batch_size + b;
                data.sample(k / n, (k % n) as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        let step = trainer.train_step(&batch);
        let breakdown = match step {
            Ok(b) => b,
            Err(e) => {
                let _ = log_writer.flush();
                return Err(e);
            }
        };
        let done = trainer.iteration;
        log_writer.serialize(LossRow::new(done, &breakdown))?;
        log_writer.flush().map_err(|e| Error::io(&log_path, e))?;
        losses.push(breakdown);
        if done % 50 == 0 || done == total {
            log::info!(
                "iter {done}/{total} d={:.4} g={:.4} fm={:.4} vgg={:.4} point={:.5}",
                breakdown.adv_d,
                breakdown.adv_g,
                breakdown.fm,
                breakdown.vgg,
                breakdown.point
            );
        }
        if config.sample_every > 0 && done % config.sample_every == 0 {
            write_sample_grid(trainer, &batch[0], &out_dir.join(SAMPLE_DIR).join(format!("iter_{done:08}.png")))?;
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done != total {
            trainer.save_checkpoint(&ckpt_dir)?;
        }
    }
    if trainer.iteration > 0 {
        trainer.save_checkpoint(&ckpt_dir)?;
    }
    Ok(TrainOutcome { checkpoint: ckpt_dir, iterations: trainer.iteration, losses })
}

/// Source | reconstruction | real strip.
pub fn triptych(generator: &Generator, sample: &CorruptedSample) -> Result<ImageTensor> {
    let recon = reconstruct(generator, &sample.source)?;
    ImageTensor::hconcat(&[&sample.source, &recon, &sample.real])
}

fn write_sample_grid(trainer: &Trainer, sample: &CorruptedSample, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    triptych(&trainer.generator, sample)?.save_png(path)
}
