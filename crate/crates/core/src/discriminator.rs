//! Bank of three patch discriminators operating on progressively
//! average-pooled copies of the (source, candidate) pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xgans_nn::{join, BatchNorm2d, Conv2d, Graph, Init, Module, Param, Var};

use crate::error::{Error, Result};
use crate::generator::LEAKY_SLOPE;

const WEIGHT_INIT: Init = Init::Normal { mean: 0.0, std: 0.02 };
const GAMMA_INIT: Init = Init::Normal { mean: 1.0, std: 0.02 };
const KERNEL: usize = 4;
const MAX_CHANNEL_MULTIPLIER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub scales: usize,
    /// Strided 4×4 convolutions per scale, excluding the output convolution.
    pub layers: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { scales: 3, layers: 4, base_channels: 64 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales != 3 {
            return Err(Error::invalid(format!("the discriminator bank has exactly 3 scales, got {}", self.scales)));
        }
        if self.layers < 2 {
            return Err(Error::invalid(format!("discriminators need at least 2 layers, got {}", self.layers)));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("discriminator base_channels must be positive"));
        }
        Ok(())
    }

    fn channels(&self, layer: usize) -> usize {
        self.base_channels * (1 << layer).min(MAX_CHANNEL_MULTIPLIER)
    }

    /// Smallest input side every scale can process: the coarsest scale sees
    /// side / 4 and halves it once per layer.
    pub fn min_input_side(&self) -> usize {
        4 << self.layers
    }
}

/// Intermediate activations and patch logits of one scale.
#[derive(Clone, Debug)]
pub struct ScaleFeatures {
    /// One map per strided layer, in depth order.
    pub features: Vec<Var>,
    pub logits: Var,
}

impl ScaleFeatures {
    /// Feature maps followed by the logit map: every tap of the matching loss.
    pub fn taps(&self) -> impl Iterator<Item = Var> + '_ {
        self.features.iter().copied().chain(std::iter::once(self.logits))
    }
}

#[derive(Clone, Debug)]
struct DownLayer {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

/// 4×4 stride-2 convolutions, batch norm after all but the first, leaky ReLU,
/// then a 4×4 stride-1 convolution to one logit channel.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    layers: Vec<DownLayer>,
    head: Conv2d,
}

impl PatchDiscriminator {
    fn new(config: &DiscriminatorConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(config.layers);
        let mut cin = in_channels;
        for i in 0..config.layers {
            let cout = config.channels(i);
            let first = i == 0;
            let conv = Conv2d::new(cin, cout, KERNEL, 2, 1, first, WEIGHT_INIT, rng);
            let norm = (!first).then(|| BatchNorm2d::new(cout, GAMMA_INIT, rng));
            layers.push(DownLayer { conv, norm });
            cin = cout;
        }
        let head = Conv2d::new(cin, 1, KERNEL, 1, 2, true, WEIGHT_INIT, rng);
        Self { layers, head }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ScaleFeatures> {
        let mut features = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let mut y = layer.conv.forward(g, h)?;
            if let Some(norm) = &layer.norm {
                y = norm.forward(g, y)?;
            }
            h = g.leaky_relu(y, LEAKY_SLOPE);
            features.push(h);
        }
        let logits = self.head.forward(g, h)?;
        Ok(ScaleFeatures { features, logits })
    }

    /// Receptive field side, in pixels of this discriminator's own input.
    pub fn receptive_field(&self) -> usize {
        // walk the stack backwards: rf = (rf - 1) * stride + kernel
        let mut rf = self.head.kernel();
        for layer in self.layers.iter().rev() {
            rf = (rf - 1) * layer.conv.stride + layer.conv.kernel();
        }
        rf
    }
}

impl Module for PatchDiscriminator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            l.conv.visit_params(&join(&p, "conv"), f);
            if let Some(n) = &l.norm {
                n.visit_params(&join(&p, "norm"), f);
            }
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layer{i}"));
            l.conv.visit_params_mut(&join(&p, "conv"), f);
            if let Some(n) = &mut l.norm {
                n.visit_params_mut(&join(&p, "norm"), f);
            }
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorBank {
    config: DiscriminatorConfig,
    nets: Vec<PatchDiscriminator>,
}

/// Three structurally identical discriminators with independent parameters.
pub fn build_discriminators(config: DiscriminatorConfig, init_seed: u64) -> Result<DiscriminatorBank> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let nets = (0..config.scales).map(|_| PatchDiscriminator::new(&config, 6, &mut rng)).collect();
    Ok(DiscriminatorBank { config, nets })
}

impl DiscriminatorBank {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn nets(&self) -> &[PatchDiscriminator] {
        &self.nets
    }

    /// Judge `(source, candidate)` at full, half and quarter resolution.
    pub fn forward(&self, g: &mut Graph, source: Var, candidate: Var) -> Result<Vec<ScaleFeatures>> {
        let (ss, cs) = (g.shape(source), g.shape(candidate));
        if ss != cs {
            return Err(Error::invalid(format!("source {ss} and candidate {cs} differ in shape")));
        }
        let min = self.config.min_input_side();
        if ss.h < min || ss.w < min || ss.h % 4 != 0 || ss.w % 4 != 0 {
            return Err(Error::invalid(format!(
                "discriminator input {ss} needs sides divisible by 4 and at least {min}"
            )));
        }
        let mut x = g.concat_channels(source, candidate)?;
        let mut out = Vec::with_capacity(self.nets.len());
        for (k, net) in self.nets.iter().enumerate() {
            if k > 0 {
                x = g.avg_pool2(x)?;
            }
            out.push(net.forward(g, x)?);
        }
        Ok(out)
    }

    /// Receptive field side of scale `k` (0-based) in original-image pixels.
    pub fn receptive_field(&self, k: usize) -> usize {
        // each 2×2 pooling doubles the footprint of one input pixel
        let mut rf = self.nets[k].receptive_field();
        for _ in 0..k {
            rf = (rf - 1) * 2 + 2;
        }
        rf
    }
}

impl Module for DiscriminatorBank {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (k, net) in self.nets.iter().enumerate() {
            net.visit_params(&join(prefix, &format!("d{k}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (k, net) in self.nets.iter_mut().enumerate() {
            net.visit_params_mut(&join(prefix, &format!("d{k}")), f);
        }
    }
}
