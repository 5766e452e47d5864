//! Tape-based reverse-mode autodiff over NCHW tensors.
//!
//! A [`Graph`] records every op applied during one forward pass. Nodes are
//! appended in execution order, so walking the tape backwards visits every
//! node after all of its consumers.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{NnError, Result};
use crate::kernels::{col2im, im2col, sgemm, Window};
use crate::param::{Param, ParamKey};
use crate::tensor::{Shape, Tensor};

const BN_EPS: f32 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise penalty used by [`Graph::masked_penalty`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Penalty {
    L1,
    L2,
}

/// How [`Graph::masked_penalty`] normalizes its sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Divide by the number of selected elements.
    Mean,
    /// Raw sum.
    Sum,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32> },
    LeakyRelu { x: Var, slope: f32 },
    Tanh { x: Var },
    Dropout { x: Var, mask: Vec<f32> },
    Add { a: Var, b: Var },
    AvgPool2 { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    ConcatChannels { a: Var, b: Var },
    ChannelAffine { x: Var, scale: Vec<f32> },
    MeanAbsDiff { a: Var, b: Var },
    SoftplusMean { x: Var, sign: f32 },
    MeanSquaredToConst { x: Var, target: f32 },
    MaskedPenalty { a: Var, b: Var, mask: Arc<Tensor>, penalty: Penalty, divisor: f64 },
    Linear { terms: Vec<(Var, f32)> },
    Select { x: Var },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamKey>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Default)]
pub struct Gradients {
    vars: HashMap<Var, Tensor>,
    params: HashMap<ParamKey, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input_with_grad`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.vars.get(&var)
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

/// Recorded forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    param_grads: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_grads: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether parameters registered from now on receive gradients.
    pub fn set_param_grads(&mut self, enabled: bool) {
        self.param_grads = enabled;
    }

    pub fn param_grads(&self) -> bool {
        self.param_grads
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad, None)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool, param: Option<ParamKey>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, p: &Param) -> Var {
        let grad = self.param_grads;
        self.push_arc(p.shared(), Op::Leaf, grad, Some(p.key()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != ws.w || stride == 0 {
            return Err(NnError::Shape(format!("conv2d weight {ws} incompatible with input {xs}")));
        }
        let win = Window::new(xs.c, xs.h, xs.w, ws.h, stride, pad)
            .ok_or_else(|| NnError::Shape(format!("kernel {} larger than padded input {xs}", ws.h)))?;
        if let Some(b) = b {
            self.value(b).expect_shape(Shape::new(1, ws.n, 1, 1))?;
        }
        let out_shape = Shape::new(xs.n, ws.n, win.out_h, win.out_w);
        let mut out = Tensor::zeros(out_shape);
        let mut col = vec![0.0; win.rows() * win.cols()];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for n in 0..xs.n {
                im2col(xv.sample(n), &win, &mut col);
                sgemm(ws.n, win.rows(), win.cols(), 1.0, wv.data(), false, &col, false, 0.0, out.sample_mut(n));
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Transposed convolution with weight laid out `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c || ws.h != ws.w || stride == 0 || output_pad >= stride {
            return Err(NnError::Shape(format!("conv_transpose2d weight {ws} incompatible with input {xs}")));
        }
        let k = ws.h;
        let grow = |len: usize| ((len.max(1) - 1) * stride + k + output_pad).checked_sub(2 * pad);
        let (out_h, out_w) = grow(xs.h)
            .zip(grow(xs.w))
            .ok_or_else(|| NnError::Shape("padding exceeds transposed output".into()))?;
        let win = Window::new(ws.c, out_h, out_w, k, stride, pad)
            .ok_or_else(|| NnError::Shape("degenerate transposed convolution".into()))?;
        debug_assert_eq!((win.out_h, win.out_w), (xs.h, xs.w));
        if let Some(b) = b {
            self.value(b).expect_shape(Shape::new(1, ws.c, 1, 1))?;
        }
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.c, out_h, out_w));
        let mut col = vec![0.0; win.rows() * win.cols()];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for n in 0..xs.n {
                sgemm(win.rows(), xs.c, win.cols(), 1.0, wv.data(), true, xv.sample(n), false, 0.0, &mut col);
                col2im(&col, &win, out.sample_mut(n));
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data());
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, rg))
    }

    /// Batch normalization using the statistics of the current batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        self.value(gamma).expect_shape(Shape::new(1, s.c, 1, 1))?;
        self.value(beta).expect_shape(Shape::new(1, s.c, 1, 1))?;
        let plane = s.plane();
        let count = (s.n * plane) as f64;
        let xv = self.value(x);
        let mut mean = vec![0.0f32; s.c];
        let mut inv_std = vec![0.0f32; s.c];
        for c in 0..s.c {
            let mut sum = 0.0f64;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                sum += xv.data()[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = sum / count;
            let mut sq = 0.0f64;
            for n in 0..s.n {
                let base = (n * s.c + c) * plane;
                sq += xv.data()[base..base + plane].iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
            }
            mean[c] = mu as f32;
            inv_std[c] = (1.0 / (sq / count + BN_EPS as f64).sqrt()) as f32;
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros(s);
        let od = out.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                let a = g[c] * inv_std[c];
                let off = bt[c] - a * mean[c];
                for (o, &v) in od[base..base + plane].iter_mut().zip(&xv.data()[base..base + plane]) {
                    *o = a * v + off;
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, mean, inv_std }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::tanh);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// Inverted dropout: zero each element with probability `p`, scale survivors by 1/(1-p).
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f32> = (0..n).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }).collect();
        let out = Tensor::from_vec(
            self.shape(x),
            self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(NnError::Shape(format!("avg_pool2 needs even spatial dims, got {s}")));
        }
        let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
        let xv = self.value(x);
        let mut out = Tensor::zeros(os);
        let od = out.data_mut();
        for p in 0..s.n * s.c {
            let src = &xv.data()[p * s.plane()..(p + 1) * s.plane()];
            let dst = &mut od[p * os.plane()..(p + 1) * os.plane()];
            for i in 0..os.h {
                for j in 0..os.w {
                    let r0 = 2 * i * s.w + 2 * j;
                    let r1 = r0 + s.w;
                    dst[i * os.w + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::AvgPool2 { x }, rg))
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h < 2 || s.w < 2 {
            return Err(NnError::Shape(format!("max_pool2 input too small: {s}")));
        }
        let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
        let xv = self.value(x);
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0u32; os.numel()];
        let od = out.data_mut();
        for p in 0..s.n * s.c {
            let base = p * s.plane();
            for i in 0..os.h {
                for j in 0..os.w {
                    let r0 = base + 2 * i * s.w + 2 * j;
                    let mut best = r0;
                    for cand in [r0 + 1, r0 + s.w, r0 + s.w + 1] {
                        if xv.data()[cand] > xv.data()[best] {
                            best = cand;
                        }
                    }
                    let o = p * os.plane() + i * os.w + j;
                    od[o] = xv.data()[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(NnError::Shape(format!("cannot concatenate {sa} and {sb} along channels")));
        }
        let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..sa.n {
            data.extend_from_slice(self.value(a).sample(n));
            data.extend_from_slice(self.value(b).sample(n));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_vec(os, data)?, Op::ConcatChannels { a, b }, rg))
    }

    /// `y[c] = scale[c] * x[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f32], shift: &[f32]) -> Result<Var> {
        let s = self.shape(x);
        if scale.len() != s.c || shift.len() != s.c {
            return Err(NnError::Shape(format!("affine coefficients do not match {s}")));
        }
        let mut out = self.value(x).clone();
        let plane = s.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % s.c;
            chunk.iter_mut().for_each(|v| *v = scale[c] * *v + shift[c]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::ChannelAffine { x, scale: scale.to_vec() }, rg))
    }

    /// `(1/N) Σ |a - b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_shape(self.shape(b))?;
        let n = self.value(a).numel() as f64;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar((sum / n) as f32), Op::MeanAbsDiff { a, b }, rg))
    }

    /// `mean(softplus(sign · x))`; with sign −1 this is −mean log σ(x), with +1 it is −mean log(1−σ(x)).
    pub fn softplus_mean(&mut self, x: Var, sign: f32) -> Var {
        let v = self.value(x);
        let n = v.numel() as f64;
        let sum: f64 = v.data().iter().map(|&z| softplus((sign * z) as f64)).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar((sum / n) as f32), Op::SoftplusMean { x, sign }, rg)
    }

    /// `mean((x - target)²)`.
    pub fn mean_squared_to(&mut self, x: Var, target: f32) -> Var {
        let v = self.value(x);
        let n = v.numel() as f64;
        let sum: f64 = v.data().iter().map(|&z| (z as f64 - target as f64).powi(2)).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar((sum / n) as f32), Op::MeanSquaredToConst { x, target }, rg)
    }

    /// Penalty on `a - b` restricted to positions where `mask` (shape `[N,1,H,W]`, 0/1) is set.
    /// Every channel of a selected pixel contributes. An empty selection yields 0.
    pub fn masked_penalty(
        &mut self,
        a: Var,
        b: Var,
        mask: Arc<Tensor>,
        penalty: Penalty,
        reduction: Reduction,
    ) -> Result<Var> {
        let s = self.shape(a);
        self.value(b).expect_shape(s)?;
        mask.expect_shape(Shape::new(s.n, 1, s.h, s.w))?;
        let plane = s.plane();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut sum = 0.0f64;
        let mut selected = 0.0f64;
        for n in 0..s.n {
            let m = &mask.data()[n * plane..(n + 1) * plane];
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                for (p, &mv) in m.iter().enumerate() {
                    if mv != 0.0 {
                        let d = av[base + p] as f64 - bv[base + p] as f64;
                        sum += match penalty {
                            Penalty::L1 => d.abs(),
                            Penalty::L2 => d * d,
                        };
                        selected += 1.0;
                    }
                }
            }
        }
        let divisor = match reduction {
            Reduction::Mean => selected,
            Reduction::Sum => 1.0,
        };
        let value = if selected == 0.0 { 0.0 } else { sum / divisor };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(value as f32), Op::MaskedPenalty { a, b, mask, penalty, divisor }, rg))
    }

    /// `Σ weight_i · x_i` over same-shaped nodes.
    pub fn linear(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| NnError::InvalidArgument("linear combination of zero terms".into()))?;
        let mut out = Tensor::zeros(self.shape(first));
        for &(v, w) in terms {
            out.add_scaled(self.value(v), w)?;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(out, Op::Linear { terms: terms.to_vec() }, rg))
    }

    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let terms: Vec<(Var, f32)> = xs.iter().map(|&v| (v, 1.0)).collect();
        self.linear(&terms)
    }

    /// Identity view of the largest scalar among `xs`; gradient flows only to it.
    pub fn max_scalar(&mut self, xs: &[Var]) -> Result<Var> {
        let best = xs
            .iter()
            .copied()
            .max_by(|a, b| self.scalar(*a).total_cmp(&self.scalar(*b)))
            .ok_or_else(|| NnError::InvalidArgument("max of zero terms".into()))?;
        let value = self.nodes[best.0].value.clone();
        let rg = self.any_grad(&[best]);
        Ok(self.push_arc(value, Op::Select { x: best }, rg, None))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rs = self.shape(root);
        if rs.numel() != 1 {
            return Err(NnError::Shape(format!("backward needs a scalar root, got {rs}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rs, 1.0));
        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                match node.param {
                    Some(key) => match out.params.get_mut(&key) {
                        Some(acc) => acc.add_scaled(&dy, 1.0)?,
                        None => {
                            out.params.insert(key, dy);
                        }
                    },
                    None => {
                        out.vars.insert(Var(i), dy);
                    }
                }
                continue;
            }
            self.backprop_node(node, dy, &mut grads)?;
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, dy: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let xs = xv.shape();
                let ws = wv.shape();
                let win = Window::new(xs.c, xs.h, xs.w, ws.h, *stride, *pad).expect("validated in forward");
                let (rows, cols) = (win.rows(), win.cols());
                let mut col = vec![0.0; rows * cols];
                let need_w = self.needs(*w);
                let need_x = self.needs(*x);
                let mut dw = Tensor::zeros(ws);
                let mut dx = if need_x { Some(Tensor::zeros(xs)) } else { None };
                for n in 0..xs.n {
                    let dyn_ = dy.sample(n);
                    if need_w {
                        im2col(xv.sample(n), &win, &mut col);
                        sgemm(ws.n, cols, rows, 1.0, dyn_, false, &col, true, 1.0, dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        sgemm(rows, ws.n, cols, 1.0, wv.data(), true, dyn_, false, 0.0, &mut col);
                        col2im(&col, &win, dx.sample_mut(n));
                    }
                }
                if need_w {
                    accumulate(grads, *w, dw)?;
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, channel_sums(&dy))?;
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let xs = xv.shape();
                let ws = wv.shape();
                let os = dy.shape();
                let win = Window::new(ws.c, os.h, os.w, ws.h, *stride, *pad).expect("validated in forward");
                let (rows, cols) = (win.rows(), win.cols());
                let mut col = vec![0.0; rows * cols];
                let need_w = self.needs(*w);
                let need_x = self.needs(*x);
                let mut dw = Tensor::zeros(ws);
                let mut dx = if need_x { Some(Tensor::zeros(xs)) } else { None };
                for n in 0..xs.n {
                    im2col(dy.sample(n), &win, &mut col);
                    if let Some(dx) = dx.as_mut() {
                        sgemm(xs.c, rows, cols, 1.0, wv.data(), false, &col, false, 0.0, dx.sample_mut(n));
                    }
                    if need_w {
                        sgemm(xs.c, cols, rows, 1.0, xv.sample(n), false, &col, true, 1.0, dw.data_mut());
                    }
                }
                if need_w {
                    accumulate(grads, *w, dw)?;
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, channel_sums(&dy))?;
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let plane = s.plane();
                let count = (s.n * plane) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; s.c];
                let mut dbeta = vec![0.0f64; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * plane;
                        for p in base..base + plane {
                            let xhat = (xv.data()[p] - mean[c]) * inv_std[c];
                            dgamma[c] += (dy.data()[p] * xhat) as f64;
                            dbeta[c] += dy.data()[p] as f64;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(s);
                    for c in 0..s.c {
                        let k = g[c] * inv_std[c];
                        let mdb = (dbeta[c] / count) as f32;
                        let mdg = (dgamma[c] / count) as f32;
                        for n in 0..s.n {
                            let base = (n * s.c + c) * plane;
                            for p in base..base + plane {
                                let xhat = (xv.data()[p] - mean[c]) * inv_std[c];
                                dx.data_mut()[p] = k * (dy.data()[p] - mdb - xhat * mdg);
                            }
                        }
                    }
                    accumulate(grads, *x, dx)?;
                }
                let cs = Shape::new(1, s.c, 1, 1);
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::from_vec(cs, dgamma.iter().map(|&v| v as f32).collect())?)?;
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::from_vec(cs, dbeta.iter().map(|&v| v as f32).collect())?)?;
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx = dy.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { g * slope })?;
                accumulate(grads, *x, dx)?;
            }
            Op::Tanh { x } => {
                let dx = dy.zip_map(&node.value, |g, y| g * (1.0 - y * y))?;
                accumulate(grads, *x, dx)?;
            }
            Op::Dropout { x, mask } => {
                let mut dx = dy;
                dx.data_mut().iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                accumulate(grads, *x, dx)?;
            }
            Op::Add { a, b } => {
                match (self.needs(*a), self.needs(*b)) {
                    (true, true) => {
                        accumulate(grads, *a, dy.clone())?;
                        accumulate(grads, *b, dy)?;
                    }
                    (true, false) => accumulate(grads, *a, dy)?,
                    (false, true) => accumulate(grads, *b, dy)?,
                    (false, false) => {}
                }
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(*x);
                let os = dy.shape();
                let mut dx = Tensor::zeros(s);
                for p in 0..s.n * s.c {
                    let src = &dy.data()[p * os.plane()..(p + 1) * os.plane()];
                    let dst = &mut dx.data_mut()[p * s.plane()..(p + 1) * s.plane()];
                    for i in 0..os.h {
                        for j in 0..os.w {
                            let g = 0.25 * src[i * os.w + j];
                            let r0 = 2 * i * s.w + 2 * j;
                            let r1 = r0 + s.w;
                            dst[r0] = g;
                            dst[r0 + 1] = g;
                            dst[r1] = g;
                            dst[r1 + 1] = g;
                        }
                    }
                }
                accumulate(grads, *x, dx)?;
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[src as usize] += g;
                }
                accumulate(grads, *x, dx)?;
            }
            Op::ConcatChannels { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (la, lb) = (sa.sample_len(), sb.sample_len());
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(sa.numel());
                    for n in 0..sa.n {
                        da.extend_from_slice(&dy.sample(n)[..la]);
                    }
                    accumulate(grads, *a, Tensor::from_vec(sa, da)?)?;
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(sb.numel());
                    for n in 0..sb.n {
                        db.extend_from_slice(&dy.sample(n)[la..la + lb]);
                    }
                    accumulate(grads, *b, Tensor::from_vec(sb, db)?)?;
                }
            }
            Op::ChannelAffine { x, scale } => {
                let s = dy.shape();
                let mut dx = dy;
                for (i, chunk) in dx.data_mut().chunks_mut(s.plane()).enumerate() {
                    let k = scale[i % s.c];
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
                accumulate(grads, *x, dx)?;
            }
            Op::MeanAbsDiff { a, b } => {
                let g = dy.item() / self.value(*a).numel() as f32;
                let da = self.value(*a).zip_map(self.value(*b), |x, y| g * sign(x - y))?;
                push_pair(self, grads, *a, *b, da)?;
            }
            Op::SoftplusMean { x, sign } => {
                let xv = self.value(*x);
                let g = dy.item() / xv.numel() as f32;
                let dx = xv.map(|z| g * sign * sigmoid(sign * z));
                accumulate(grads, *x, dx)?;
            }
            Op::MeanSquaredToConst { x, target } => {
                let xv = self.value(*x);
                let g = 2.0 * dy.item() / xv.numel() as f32;
                accumulate(grads, *x, xv.map(|z| g * (z - target)))?;
            }
            Op::MaskedPenalty { a, b, mask, penalty, divisor } => {
                let av = self.value(*a);
                let s = av.shape();
                let plane = s.plane();
                let mut da = Tensor::zeros(s);
                if *divisor > 0.0 {
                    let g = (dy.item() as f64 / divisor) as f32;
                    let bv = self.value(*b);
                    for n in 0..s.n {
                        let m = &mask.data()[n * plane..(n + 1) * plane];
                        for c in 0..s.c {
                            let base = (n * s.c + c) * plane;
                            for (p, &mv) in m.iter().enumerate() {
                                if mv != 0.0 {
                                    let d = av.data()[base + p] - bv.data()[base + p];
                                    da.data_mut()[base + p] = match penalty {
                                        Penalty::L1 => g * sign(d),
                                        Penalty::L2 => 2.0 * g * d,
                                    };
                                }
                            }
                        }
                    }
                }
                push_pair(self, grads, *a, *b, da)?;
            }
            Op::Linear { terms } => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        let mut g = dy.clone();
                        g.scale(w);
                        accumulate(grads, v, g)?;
                    }
                }
            }
            Op::Select { x } => accumulate(grads, *x, dy)?,
        }
        Ok(())
    }
}

/// Route `da` to `a` and `-da` to `b`, for losses of `a - b`.
fn push_pair(g: &Graph, grads: &mut [Option<Tensor>], a: Var, b: Var, da: Tensor) -> Result<()> {
    if g.needs(b) {
        let db = da.map(|v| -v);
        accumulate(grads, b, db)?;
    }
    if g.needs(a) {
        accumulate(grads, a, da)?;
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn add_channel_bias(out: &mut Tensor, bias: &[f32]) {
    let s = out.shape();
    for (i, chunk) in out.data_mut().chunks_mut(s.plane()).enumerate() {
        let b = bias[i % s.c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(t: &Tensor) -> Tensor {
    let s = t.shape();
    let mut sums = vec![0.0f64; s.c];
    for (i, chunk) in t.data().chunks(s.plane()).enumerate() {
        sums[i % s.c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
    }
    Tensor::from_fn(Shape::new(1, s.c, 1, 1), |c| sums[c] as f32)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
