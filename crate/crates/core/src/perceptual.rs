//! Frozen feature extractors for the perceptual loss.
//!
//! The preferred extractor is a 19-layer VGG whose convolution weights are
//! read from a safetensors file with torchvision naming (`features.N.weight`).
//! Without weights, a fixed-seed random convolution stack with the same
//! five-tap layout stands in so nothing depends on a download.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xgans_nn::{Conv2d, Graph, Init, Tensor, Var};

use crate::error::{Error, Result};

/// Environment variable pointing at VGG-19 weights in safetensors form.
pub const VGG_WEIGHTS_ENV: &str = "XGANS_VGG19_WEIGHTS";

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Output channels of the 16 VGG-19 convolutions.
const VGG19_CONVS: [usize; 16] = [64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512];
/// 2×2 max pooling follows these convolution indices.
const VGG19_POOL_AFTER: [usize; 4] = [1, 3, 7, 11];
/// relu1_1, relu2_1, relu3_1, relu4_1, relu5_1.
const VGG19_TAPS: [usize; 5] = [0, 2, 4, 8, 12];
/// Index of each convolution inside torchvision's `features` sequence.
const VGG19_TORCH_INDEX: [usize; 16] = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34];

const RANDOM_CHANNELS: [usize; 5] = [16, 32, 64, 64, 64];

/// Where perceptual features come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PerceptualSource {
    /// Pretrained VGG-19; falls back to [`PerceptualSource::RandomConv`] when
    /// `weights` is absent and `allow_fallback` is set.
    Vgg19 { weights: Option<PathBuf>, allow_fallback: bool },
    RandomConv { seed: u64 },
}

impl Default for PerceptualSource {
    fn default() -> Self {
        Self::Vgg19 { weights: None, allow_fallback: true }
    }
}

/// A network with fixed parameters mapping an image batch in [-1, 1] to a
/// list of feature maps.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Record the extractor on `g`; its parameters never receive gradients.
    fn features(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>>;
}

/// Fixed-seed random convolution stack: five 3×3 conv+ReLU stages with 2×2
/// max pooling between them, tapped after every stage.
pub struct RandomConvFeatures {
    convs: Vec<Conv2d>,
}

impl RandomConvFeatures {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let convs = RANDOM_CHANNELS
            .iter()
            .map(|&cout| {
                let c = Conv2d::new(cin, cout, 3, 1, 1, false, Init::KaimingNormal, &mut rng);
                cin = cout;
                c
            })
            .collect();
        Self { convs }
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn name(&self) -> &str {
        "random_conv"
    }

    fn features(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        frozen(g, |g| {
            let mut out = Vec::with_capacity(self.convs.len());
            let mut x = image;
            for (i, conv) in self.convs.iter().enumerate() {
                if i > 0 {
                    x = g.max_pool2(x)?;
                }
                let y = conv.forward(g, x)?;
                x = g.relu(y);
                out.push(x);
            }
            Ok(out)
        })
    }
}

pub struct Vgg19Features {
    convs: Vec<Conv2d>,
}

impl Vgg19Features {
    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, _) = xgans_nn::io::load_tensors(path).map_err(|e| {
            Error::Config(format!("cannot read VGG-19 weights from {}: {e}", path.display()))
        })?;
        Self::from_tensors(&tensors)
    }

    pub fn from_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut cin = 3;
        let mut convs = Vec::with_capacity(VGG19_TAPS[4] + 1);
        // layers past relu5_1 never contribute
        for (i, &cout) in VGG19_CONVS.iter().enumerate().take(VGG19_TAPS[4] + 1) {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut conv = Conv2d::new(cin, cout, 3, 1, 1, true, Init::Constant(0.0), &mut rng);
            let prefix = format!("features.{}", VGG19_TORCH_INDEX[i]);
            xgans_nn::load_module(&mut conv, &prefix, tensors)
                .map_err(|e| Error::Config(format!("VGG-19 weights: {e}")))?;
            convs.push(conv);
            cin = cout;
        }
        Ok(Self { convs })
    }
}

impl FeatureExtractor for Vgg19Features {
    fn name(&self) -> &str {
        "vgg19"
    }

    fn features(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        frozen(g, |g| {
            // [-1, 1] -> ImageNet-normalized
            let scale: Vec<f32> = IMAGENET_STD.iter().map(|s| 0.5 / s).collect();
            let shift: Vec<f32> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| (0.5 - m) / s).collect();
            let mut x = g.channel_affine(image, &scale, &shift)?;
            let mut out = Vec::with_capacity(VGG19_TAPS.len());
            for (i, conv) in self.convs.iter().enumerate() {
                let y = conv.forward(g, x)?;
                x = g.relu(y);
                if VGG19_TAPS.contains(&i) {
                    out.push(x);
                }
                if VGG19_POOL_AFTER.contains(&i) && i < VGG19_TAPS[4] {
                    x = g.max_pool2(x)?;
                }
            }
            Ok(out)
        })
    }
}

fn frozen<T>(g: &mut Graph, f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
    let prev = g.param_grads();
    g.set_param_grads(false);
    let out = f(g);
    g.set_param_grads(prev);
    out
}

/// Instantiate the configured extractor. A VGG request without weights
/// consults [`VGG_WEIGHTS_ENV`] and then, if allowed, the random fallback.
pub fn build_extractor(source: &PerceptualSource) -> Result<Box<dyn FeatureExtractor>> {
    match source {
        PerceptualSource::RandomConv { seed } => Ok(Box::new(RandomConvFeatures::new(*seed))),
        PerceptualSource::Vgg19 { weights, allow_fallback } => {
            let path = weights.clone().or_else(|| std::env::var_os(VGG_WEIGHTS_ENV).map(PathBuf::from));
            match path {
                Some(p) => Ok(Box::new(Vgg19Features::load(&p)?)),
                None if *allow_fallback => {
                    log::info!("no VGG-19 weights configured; using the random-convolution extractor");
                    Ok(Box::new(RandomConvFeatures::new(0)))
                }
                None => Err(Error::Config(format!(
                    "perceptual loss needs VGG-19 weights (set {VGG_WEIGHTS_ENV} or allow the fallback)"
                ))),
            }
        }
    }
}
