use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::graph::Gradients;
use crate::param::Module;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Adam with bias correction. Moments are keyed by parameter name so they
/// survive a checkpoint round trip.
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0, moments: BTreeMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every parameter of `module` that has a gradient.
    /// Returns the number of parameters touched.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &Gradients) -> Result<usize> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let step_size = lr / bc1;
        let mut touched = 0;
        let mut failure = None;
        let moments = &mut self.moments;
        module.visit_params_mut("", &mut |name, p| {
            let Some(g) = grads.param(p.key()) else { return };
            if g.shape() != p.value().shape() {
                failure = Some(NnError::Shape(format!("gradient for `{name}` has shape {}", g.shape())));
                return;
            }
            let st = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let w = p.value_mut();
            for (((w, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut().iter_mut())
                .zip(st.v.data_mut().iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= step_size * *m / ((*v / bc2).sqrt() + eps);
            }
            touched += 1;
        });
        failure.map_or(Ok(touched), Err)
    }

    /// Moments as named tensors (`m.<param>`, `v.<param>`).
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (name, st) in &self.moments {
            out.push((format!("m.{name}"), st.m.clone()));
            out.push((format!("v.{name}"), st.v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, steps: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut moments = BTreeMap::new();
        for (key, m) in tensors {
            let Some(name) = key.strip_prefix("m.") else { continue };
            let v = tensors
                .get(&format!("v.{name}"))
                .ok_or_else(|| NnError::MissingParam(format!("v.{name}")))?;
            moments.insert(name.to_string(), Moments { m: m.clone(), v: v.clone() });
        }
        self.steps = steps;
        self.moments = moments;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::param::{join, Param};
    use crate::tensor::Shape;

    struct Quad(Param);

    impl Module for Quad {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
            f(&join(prefix, "x"), &self.0);
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&join(prefix, "x"), &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first Adam step is lr * sign(g)
        let mut q = Quad(Param::new(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap()));
        let mut g = Graph::new();
        let x = g.param(&q.0);
        let loss = g.mean_squared_to(x, 0.0);
        let grads = g.backward(loss).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        assert_eq!(adam.step(&mut q, &grads).unwrap(), 1);
        let v = q.0.value().data();
        assert!((v[0] - 0.9).abs() < 1e-5 && (v[1] + 1.9).abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad(Param::new(Tensor::full(Shape::new(1, 1, 1, 3), 3.0)));
        let mut adam = Adam::new(AdamConfig { lr: 0.05, beta1: 0.9, ..Default::default() });
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&q.0);
            let loss = g.mean_squared_to(x, 1.0);
            let grads = g.backward(loss).unwrap();
            adam.step(&mut q, &grads).unwrap();
        }
        assert!(q.0.value().data().iter().all(|v| (v - 1.0).abs() < 1e-2));
    }

    #[test]
    fn state_round_trip() {
        let mut q = Quad(Param::new(Tensor::full(Shape::new(1, 1, 1, 3), 3.0)));
        let mut adam = Adam::new(AdamConfig::default());
        let mut g = Graph::new();
        let x = g.param(&q.0);
        let loss = g.mean_squared_to(x, 1.0);
        adam.step(&mut q, &g.backward(loss).unwrap()).unwrap();
        let state: BTreeMap<_, _> = adam.state_tensors().into_iter().collect();
        let mut fresh = Adam::new(AdamConfig::default());
        fresh.load_state(adam.steps(), &state).unwrap();
        assert_eq!(fresh.state_tensors(), adam.state_tensors());
        assert_eq!(fresh.steps(), 1);
    }
}
