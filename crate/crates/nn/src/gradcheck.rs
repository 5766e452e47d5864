//! Central finite-difference oracle for gradients computed by [`Graph::backward`].
//!
//! The oracle only ever runs forward passes, so it stays independent of the
//! backward rules it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::param::Module;
use crate::tensor::Tensor;

/// Analytic and numeric derivatives at the probed coordinates.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `‖analytic − numeric‖₂ / max(‖numeric‖₂, ‖analytic‖₂)`; 0 when both vanish.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = self.numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom == 0.0 {
            0.0
        } else {
            diff / denom
        }
    }

    pub fn len(&self) -> usize {
        self.analytic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.analytic.is_empty()
    }

    pub fn extend(&mut self, other: GradComparison) {
        self.analytic.extend(other.analytic);
        self.numeric.extend(other.numeric);
    }
}

fn pick(len: usize, coords: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if coords >= len {
        (0..len).collect()
    } else {
        let mut idx = sample(&mut rng, len, coords).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    if g.shape(v).numel() != 1 {
        return Err(NnError::Shape(format!("loss must be scalar, got {}", g.shape(v))));
    }
    Ok(g.scalar(v) as f64)
}

/// Compare `d loss / d input` against central differences at up to `coords` entries.
pub fn check_input(
    input: &Tensor,
    loss: impl Fn(&mut Graph, Var) -> Result<Var>,
    eps: f32,
    coords: usize,
    seed: u64,
) -> Result<GradComparison> {
    let mut g = Graph::new();
    let x = g.input_with_grad(input.clone());
    let l = loss(&mut g, x)?;
    let grads = g.backward(l)?;
    let zero = Tensor::zeros(input.shape());
    let dx = grads.wrt(x).unwrap_or(&zero);
    let mut cmp = GradComparison { analytic: Vec::new(), numeric: Vec::new() };
    for i in pick(input.numel(), coords, seed) {
        let eval = |delta: f32| -> Result<f64> {
            let mut t = input.clone();
            t.data_mut()[i] += delta;
            let mut g = Graph::new();
            let x = g.input(t);
            let l = loss(&mut g, x)?;
            scalar_of(&g, l)
        };
        let num = (eval(eps)? - eval(-eps)?) / (2.0 * eps as f64);
        cmp.analytic.push(dx.data()[i] as f64);
        cmp.numeric.push(num);
    }
    Ok(cmp)
}

/// Compare parameter gradients of `module` against central differences,
/// probing up to `coords_per_param` entries of every parameter.
pub fn check_params<M: Module>(
    module: &mut M,
    loss: impl Fn(&M, &mut Graph) -> Result<Var>,
    eps: f32,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradComparison> {
    let mut g = Graph::new();
    let l = loss(module, &mut g)?;
    let grads = g.backward(l)?;
    let mut analytic_all = Vec::new();
    let mut targets = Vec::new();
    let mut param_index = 0u64;
    module.visit_params("", &mut |name, p| {
        let zero = Tensor::zeros(p.value().shape());
        let grad = grads.param(p.key()).unwrap_or(&zero);
        for i in pick(p.value().numel(), coords_per_param, seed ^ param_index.wrapping_mul(0x9e37_79b9)) {
            analytic_all.push(grad.data()[i] as f64);
            targets.push((name.to_string(), i));
        }
        param_index += 1;
    });
    let mut numeric = Vec::with_capacity(targets.len());
    for (name, i) in &targets {
        let mut eval = |delta: f32| -> Result<f64> {
            nudge(module, name, *i, delta);
            let mut g = Graph::new();
            let l = loss(module, &mut g);
            nudge(module, name, *i, -delta);
            let l = l?;
            scalar_of(&g, l)
        };
        let up = eval(eps)?;
        let down = eval(-eps)?;
        numeric.push((up - down) / (2.0 * eps as f64));
    }
    Ok(GradComparison { analytic: analytic_all, numeric })
}

fn nudge<M: Module>(module: &mut M, target: &str, index: usize, delta: f32) {
    module.visit_params_mut("", &mut |name, p| {
        if name == target {
            p.value_mut().data_mut()[index] += delta;
        }
    });
}
