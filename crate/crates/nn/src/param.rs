use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::tensor::Tensor;

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Param`], used to route gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(u64);

/// Trainable tensor. The value is shared copy-on-write with any graph that
/// recorded it, so updating a parameter never invalidates a live graph.
#[derive(Debug)]
pub struct Param {
    key: ParamKey,
    value: Arc<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self { key: ParamKey(NEXT_KEY.fetch_add(1, Ordering::Relaxed)), value: Arc::new(value) }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) {
        self.value = Arc::new(value);
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }
}

impl Clone for Param {
    /// Clones get a fresh key: the copy is an independent parameter.
    fn clone(&self) -> Self {
        Self::new(self.value().clone())
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// Named parameter values in visiting order.
    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name.to_string(), p.value().clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value().numel());
        n
    }
}

/// Join a prefix and a field name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
