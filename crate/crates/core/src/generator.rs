//! Residual encoder–decoder generator: 7×7 stem, strided downsampling,
//! residual blocks, transposed-convolution upsampling and a tanh head.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xgans_nn::{join, BatchNorm2d, Conv2d, ConvTranspose2d, Graph, Init, Module, Param, Tensor, Var};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f32 = 0.2;
const WEIGHT_INIT: Init = Init::Normal { mean: 0.0, std: 0.02 };
const GAMMA_INIT: Init = Init::Normal { mean: 1.0, std: 0.02 };

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    /// Stride-2 convolutions after the stride-1 stem.
    pub downsample_stages: usize,
    pub residual_blocks: usize,
    pub dropout_rate: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { base_channels: 64, downsample_stages: 2, residual_blocks: 9, dropout_rate: 0.5 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::invalid("generator base_channels must be positive"));
        }
        if self.residual_blocks == 0 {
            return Err(Error::invalid("generator needs at least one residual block"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.downsample_stages > 6 {
            return Err(Error::invalid("more than 6 downsampling stages"));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.downsample_stages
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.downsample_stages
    }
}

/// Whether dropout is active, and the randomness that drives it.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

/// conv → batch norm → leaky ReLU.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, stride, k / 2, false, WEIGHT_INIT, rng),
            norm: BatchNorm2d::new(cout, GAMMA_INIT, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}

/// Two 3×3 conv blocks with dropout between them and an identity skip.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    first: ConvBlock,
    second: ConvBlock,
}

impl ResidualBlock {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { first: ConvBlock::new(channels, channels, 3, 1, rng), second: ConvBlock::new(channels, channels, 3, 1, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, dropout: f32, mode: &mut Mode<'_>) -> Result<Var> {
        let mut y = self.first.forward(g, x)?;
        if let Mode::Train(rng) = mode {
            if dropout > 0.0 {
                y = g.dropout(y, dropout, &mut **rng)?;
            }
        }
        let y = self.second.forward(g, y)?;
        Ok(g.add(x, y)?)
    }

    /// Zero both convolution kernels (used to check the skip path).
    pub fn zero_convolutions(&mut self) {
        for block in [&mut self.first, &mut self.second] {
            block.conv.weight.value_mut().data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    deconv: ConvTranspose2d,
    norm: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    stem: ConvBlock,
    down: Vec<ConvBlock>,
    blocks: Vec<ResidualBlock>,
    up: Vec<UpBlock>,
    head: Conv2d,
}

/// Build a generator with parameters drawn deterministically from `init_seed`.
pub fn build_generator(config: GeneratorConfig, init_seed: u64) -> Result<Generator> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let base = config.base_channels;
    let stem = ConvBlock::new(3, base, 7, 1, &mut rng);
    let down = (0..config.downsample_stages)
        .map(|i| ConvBlock::new(base << i, base << (i + 1), 3, 2, &mut rng))
        .collect();
    let width = config.bottleneck_channels();
    let blocks = (0..config.residual_blocks).map(|_| ResidualBlock::new(width, &mut rng)).collect();
    let up = (0..config.downsample_stages)
        .rev()
        .map(|i| UpBlock {
            deconv: ConvTranspose2d::new(base << (i + 1), base << i, 3, 2, 1, 1, false, WEIGHT_INIT, &mut rng),
            norm: BatchNorm2d::new(base << i, GAMMA_INIT, &mut rng),
        })
        .collect();
    let head = Conv2d::new(base, 3, 7, 1, 3, true, WEIGHT_INIT, &mut rng);
    Ok(Generator { config, stem, down, blocks, up, head })
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn residual_blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn residual_blocks_mut(&mut self) -> &mut [ResidualBlock] {
        &mut self.blocks
    }

    pub fn check_input(&self, shape: xgans_nn::Shape) -> Result<()> {
        let m = self.config.size_multiple();
        if shape.c != 3 || shape.h == 0 || shape.w == 0 || shape.h % m != 0 || shape.w % m != 0 {
            return Err(Error::invalid(format!(
                "generator input {shape} must be RGB with sides divisible by {m}"
            )));
        }
        Ok(())
    }

    /// Encoder output (after the downsampling stages), before the residual blocks.
    pub fn encode(&self, g: &mut Graph, source: Var) -> Result<Var> {
        self.check_input(g.shape(source))?;
        let mut x = self.stem.forward(g, source)?;
        for block in &self.down {
            x = block.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, source: Var, mut mode: Mode<'_>) -> Result<Var> {
        let mut x = self.encode(g, source)?;
        for block in &self.blocks {
            x = block.forward(g, x, self.config.dropout_rate, &mut mode)?;
        }
        for up in &self.up {
            let y = up.deconv.forward(g, x)?;
            let y = up.norm.forward(g, y)?;
            x = g.leaky_relu(y, LEAKY_SLOPE);
        }
        let y = self.head.forward(g, x)?;
        Ok(g.tanh(y))
    }

    /// Inference-mode reconstruction of a `[N, 3, H, W]` batch.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        g.set_param_grads(false);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }
}

impl Module for Generator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, b) in self.down.iter().enumerate() {
            b.visit(&join(prefix, &format!("down{i}")), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("res{i}"));
            b.first.visit(&join(&p, "a"), f);
            b.second.visit(&join(&p, "b"), f);
        }
        for (i, u) in self.up.iter().enumerate() {
            let p = join(prefix, &format!("up{i}"));
            u.deconv.visit_params(&join(&p, "deconv"), f);
            u.norm.visit_params(&join(&p, "norm"), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.down.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("res{i}"));
            b.first.visit_mut(&join(&p, "a"), f);
            b.second.visit_mut(&join(&p, "b"), f);
        }
        for (i, u) in self.up.iter_mut().enumerate() {
            let p = join(prefix, &format!("up{i}"));
            u.deconv.visit_params_mut(&join(&p, "deconv"), f);
            u.norm.visit_params_mut(&join(&p, "norm"), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}
