//! Parameterized layers that record themselves onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::param::{join, Module, Param};
use crate::tensor::{Shape, Tensor};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal { mean: f32, std: f32 },
    /// He/Kaiming normal for ReLU fan-in.
    KaimingNormal,
    Constant(f32),
}

impl Init {
    fn sample<R: Rng + ?Sized>(&self, shape: Shape, fan_in: usize, rng: &mut R) -> Tensor {
        match *self {
            Init::Constant(v) => Tensor::full(shape, v),
            Init::Normal { mean, std } => normal_tensor(shape, mean, std, rng),
            Init::KaimingNormal => normal_tensor(shape, 0.0, (2.0 / fan_in.max(1) as f32).sqrt(), rng),
        }
    }
}

fn normal_tensor<R: Rng + ?Sized>(shape: Shape, mean: f32, std: f32, rng: &mut R) -> Tensor {
    if std == 0.0 {
        return Tensor::full(shape, mean);
    }
    let dist = Normal::new(mean, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Square-kernel 2-D convolution with zero padding. Weight is `[C_out, C_in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = Shape::new(out_channels, in_channels, kernel, kernel);
        let weight = Param::new(init.sample(shape, in_channels * kernel * kernel, rng));
        let bias = bias.then(|| Param::new(Tensor::zeros(Shape::new(1, out_channels, 1, 1))));
        Self { weight, bias, stride, pad }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape().n
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().shape().h
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Transposed convolution. Weight is `[C_in, C_out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = Shape::new(in_channels, out_channels, kernel, kernel);
        let weight = Param::new(init.sample(shape, in_channels * kernel * kernel, rng));
        let bias = bias.then(|| Param::new(Tensor::zeros(Shape::new(1, out_channels, 1, 1))));
        Self { weight, bias, stride, pad, output_pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad, self.output_pad)
    }
}

impl Module for ConvTranspose2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Batch normalization with learned affine terms; always normalizes with
/// the statistics of the batch it is given.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
}

impl BatchNorm2d {
    pub fn new<R: Rng + ?Sized>(channels: usize, gamma_init: Init, rng: &mut R) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        Self { gamma: Param::new(gamma_init.sample(shape, 1, rng)), beta: Param::new(Tensor::zeros(shape)) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.batch_norm(x, gamma, beta)
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Overwrite every parameter of `module` from `tensors`, matching by name.
/// Shapes may differ as long as the element counts agree (e.g. 1-D biases).
pub fn load_module<M: Module + ?Sized>(
    module: &mut M,
    prefix: &str,
    tensors: &std::collections::BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut failure = None;
    module.visit_params_mut(prefix, &mut |name, p| {
        if failure.is_some() {
            return;
        }
        match tensors.get(name) {
            None => failure = Some(NnError::MissingParam(name.to_string())),
            Some(t) if t.numel() != p.value().numel() => {
                failure = Some(NnError::Shape(format!(
                    "parameter `{name}` expects {} elements, found {}",
                    p.value().numel(),
                    t.numel()
                )))
            }
            Some(t) => {
                let shape = p.value().shape();
                p.set(t.clone().reshape(shape).expect("element count checked"));
            }
        }
    });
    failure.map_or(Ok(()), Err)
}
