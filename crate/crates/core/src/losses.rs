//! Adversarial, feature-matching, perceptual and corresponding-point losses.
//!
//! Graph-level functions record differentiable nodes; [`combine`] applies the
//! loss weights to already-evaluated components.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use xgans_nn::{Graph, Penalty, Reduction, Tensor, Var};

use crate::discriminator::ScaleFeatures;
use crate::error::{Error, Result};
use crate::perceptual::FeatureExtractor;

pub const SCALES: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Cross-entropy D loss, non-saturating G loss.
    #[default]
    VanillaLog,
    LeastSquares,
}

/// How the generator's adversarial term combines the three scales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DAggregation {
    #[default]
    Sum,
    Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointPenalty {
    #[default]
    L2,
    L1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointNormalization {
    /// Average over kept pixels and channels.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_vgg: f64,
    pub lambda_point: f64,
    pub point_loss_enabled: bool,
    pub adversarial_mode: AdversarialMode,
    pub d_aggregation: DAggregation,
    pub point_penalty: PointPenalty,
    pub point_normalization: PointNormalization,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fm: 10.0,
            lambda_vgg: 10.0,
            lambda_point: 10.0,
            point_loss_enabled: true,
            adversarial_mode: AdversarialMode::VanillaLog,
            d_aggregation: DAggregation::Sum,
            point_penalty: PointPenalty::L2,
            point_normalization: PointNormalization::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_fm", self.lambda_fm), ("lambda_vgg", self.lambda_vgg), ("lambda_point", self.lambda_point)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Copy with all three lambdas set to zero.
    pub fn adversarial_only(&self) -> Self {
        Self { lambda_fm: 0.0, lambda_vgg: 0.0, lambda_point: 0.0, ..self.clone() }
    }

    fn penalty(&self) -> (Penalty, Reduction) {
        let p = match self.point_penalty {
            PointPenalty::L2 => Penalty::L2,
            PointPenalty::L1 => Penalty::L1,
        };
        let r = match self.point_normalization {
            PointNormalization::Mean => Reduction::Mean,
            PointNormalization::Sum => Reduction::Sum,
        };
        (p, r)
    }
}

/// Scalar loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_d: f64,
    pub adv_g: f64,
    pub fm: f64,
    pub vgg: f64,
    pub point: f64,
    pub total_g: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("adv_d", self.adv_d),
            ("adv_g", self.adv_g),
            ("fm", self.fm),
            ("vgg", self.vgg),
            ("point", self.point),
            ("total_g", self.total_g),
        ]
    }
}

/// Unweighted generator-side components, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorComponents {
    pub adv_g: f64,
    pub fm: f64,
    pub vgg: f64,
    pub point: f64,
}

fn check_scales(n: usize, what: &str) -> Result<()> {
    if n != SCALES {
        return Err(Error::invalid(format!("{what}: expected {SCALES} scales, got {n}")));
    }
    Ok(())
}

fn real_term(g: &mut Graph, logits: Var, mode: AdversarialMode) -> Var {
    match mode {
        AdversarialMode::VanillaLog => g.softplus_mean(logits, -1.0),
        AdversarialMode::LeastSquares => g.mean_squared_to(logits, 1.0),
    }
}

fn fake_term(g: &mut Graph, logits: Var, mode: AdversarialMode) -> Var {
    match mode {
        AdversarialMode::VanillaLog => g.softplus_mean(logits, 1.0),
        AdversarialMode::LeastSquares => g.mean_squared_to(logits, 0.0),
    }
}

/// Per-scale discriminator losses; train on their sum.
pub fn discriminator_losses(g: &mut Graph, real_logits: &[Var], fake_logits: &[Var], mode: AdversarialMode) -> Result<Vec<Var>> {
    check_scales(real_logits.len(), "real logits")?;
    check_scales(fake_logits.len(), "fake logits")?;
    let mut out = Vec::with_capacity(SCALES);
    for (&r, &f) in real_logits.iter().zip(fake_logits) {
        if g.shape(r) != g.shape(f) {
            return Err(Error::invalid(format!("logit shapes differ: {:?} vs {:?}", g.shape(r), g.shape(f))));
        }
        let a = real_term(g, r, mode);
        let b = fake_term(g, f, mode);
        out.push(g.sum(&[a, b])?);
    }
    Ok(out)
}

/// Per-scale generator adversarial terms (non-saturating in log mode).
pub fn generator_adversarial_losses(g: &mut Graph, fake_logits: &[Var], mode: AdversarialMode) -> Result<Vec<Var>> {
    check_scales(fake_logits.len(), "fake logits")?;
    Ok(fake_logits.iter().map(|&f| real_term(g, f, mode)).collect())
}

pub fn aggregate(g: &mut Graph, per_scale: &[Var], aggregation: DAggregation) -> Result<Var> {
    Ok(match aggregation {
        DAggregation::Sum => g.sum(per_scale)?,
        DAggregation::Max => g.max_scalar(per_scale)?,
    })
}

/// `(adv_d, adv_g)`: D loss summed over scales, G loss aggregated per `aggregation`.
pub fn adversarial_losses(
    g: &mut Graph,
    real_logits: &[Var],
    fake_logits: &[Var],
    mode: AdversarialMode,
    aggregation: DAggregation,
) -> Result<(Var, Var)> {
    let d = discriminator_losses(g, real_logits, fake_logits, mode)?;
    let adv_d = g.sum(&d)?;
    let gl = generator_adversarial_losses(g, fake_logits, mode)?;
    let adv_g = aggregate(g, &gl, aggregation)?;
    Ok((adv_d, adv_g))
}

/// Sum over scales and taps of the mean absolute feature difference.
pub fn feature_matching_loss(g: &mut Graph, real: &[ScaleFeatures], fake: &[ScaleFeatures]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::invalid(format!("feature lists have {} and {} scales", real.len(), fake.len())));
    }
    let mut terms = Vec::new();
    for (k, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.features.len() != f.features.len() {
            return Err(Error::invalid(format!("scale {k}: {} vs {} feature maps", r.features.len(), f.features.len())));
        }
        for (a, b) in r.taps().zip(f.taps()) {
            if g.shape(a) != g.shape(b) {
                return Err(Error::invalid(format!("scale {k}: tap shapes {:?} vs {:?}", g.shape(a), g.shape(b))));
            }
            terms.push(g.mean_abs_diff(a, b)?);
        }
    }
    Ok(g.sum(&terms)?)
}

/// `lambda · Σ_i mean |F_i(real) − F_i(fake)|` over the extractor's taps.
pub fn perceptual_loss(g: &mut Graph, real: Var, fake: Var, extractor: &dyn FeatureExtractor, lambda: f64) -> Result<Var> {
    if g.shape(real) != g.shape(fake) {
        return Err(Error::invalid(format!("image shapes differ: {:?} vs {:?}", g.shape(real), g.shape(fake))));
    }
    let fr = extractor.features(g, real)?;
    let ff = extractor.features(g, fake)?;
    let mut terms = Vec::with_capacity(fr.len());
    for (a, b) in fr.into_iter().zip(ff) {
        let d = g.mean_abs_diff(a, b)?;
        terms.push((d, lambda as f32));
    }
    Ok(g.linear(&terms)?)
}

/// Penalty between `source` and `generated` at kept pixels of `mask` (`[N,1,H,W]`).
pub fn corresponding_point_loss(
    g: &mut Graph,
    source: Var,
    generated: Var,
    mask: Arc<Tensor>,
    weights: &LossWeights,
) -> Result<Var> {
    if g.shape(source) != g.shape(generated) {
        return Err(Error::invalid(format!(
            "generated shape {:?} differs from source {:?}",
            g.shape(generated),
            g.shape(source)
        )));
    }
    let (p, r) = weights.penalty();
    Ok(g.masked_penalty(generated, source, mask, p, r)?)
}

/// Value of the default (mean squared) point loss for one sample.
pub fn corresponding_point_loss_value(
    sample: &crate::corruption::CorruptedSample,
    generated: &crate::image::ImageTensor,
) -> Result<f64> {
    if generated.dims() != sample.real.dims() {
        return Err(Error::invalid(format!(
            "generated image is {:?}, sample is {:?}",
            generated.dims(),
            sample.real.dims()
        )));
    }
    let mut g = Graph::new();
    let s = g.input(sample.source.to_tensor());
    let x = g.input(generated.to_tensor());
    let v = corresponding_point_loss(&mut g, s, x, Arc::new(sample.mask.to_tensor()), &LossWeights::default())?;
    Ok(g.scalar(v) as f64)
}

/// Apply `weights` to the components. A non-finite component is reported by name.
pub fn combine(parts: GeneratorComponents, weights: &LossWeights) -> Result<LossBreakdown> {
    let point_weight = if weights.point_loss_enabled { weights.lambda_point } else { 0.0 };
    for (name, v) in [("adv_g", parts.adv_g), ("fm", parts.fm), ("vgg", parts.vgg), ("point", parts.point)] {
        if !v.is_finite() {
            return Err(Error::NumericFailure { component: name.into(), iteration: 0 });
        }
    }
    let total_g = parts.adv_g + weights.lambda_fm * parts.fm + weights.lambda_vgg * parts.vgg + point_weight * parts.point;
    if !total_g.is_finite() {
        return Err(Error::NumericFailure { component: "total_g".into(), iteration: 0 });
    }
    Ok(LossBreakdown { adv_d: 0.0, adv_g: parts.adv_g, fm: parts.fm, vgg: parts.vgg, point: parts.point, total_g })
}

/// Graph nodes of the unweighted generator components; `point` is absent when disabled.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub adv_g: Var,
    pub fm: Var,
    pub vgg: Var,
    pub point: Option<Var>,
}

/// Weighted total as a differentiable node, plus the evaluated breakdown.
pub fn total_generator_objective(g: &mut Graph, terms: GeneratorTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let point_value = terms.point.map_or(0.0, |p| g.scalar(p) as f64);
    let parts = GeneratorComponents {
        adv_g: g.scalar(terms.adv_g) as f64,
        fm: g.scalar(terms.fm) as f64,
        vgg: g.scalar(terms.vgg) as f64,
        point: point_value,
    };
    let effective = LossWeights { point_loss_enabled: weights.point_loss_enabled && terms.point.is_some(), ..weights.clone() };
    let breakdown = combine(parts, &effective)?;
    let mut linear = vec![
        (terms.adv_g, 1.0),
        (terms.fm, weights.lambda_fm as f32),
        (terms.vgg, weights.lambda_vgg as f32),
    ];
    if let (Some(p), true) = (terms.point, effective.point_loss_enabled) {
        linear.push((p, weights.lambda_point as f32));
    }
    Ok((g.linear(&linear)?, breakdown))
}
