use std::collections::HashMap;

use ctxmod_autodiff::{Gradients, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, stored in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Frozen parameters enter the tape as constants and are never updated.
    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| CoreError::Checkpoint(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(CoreError::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                value.shape(),
                self.values[i].shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    /// Places every parameter on the tape.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .zip(&self.frozen)
                .map(|(v, &f)| if f { tape.constant(v.clone()) } else { tape.param(v.clone()) })
                .collect(),
        }
    }
}

/// Tape handles for the parameters of a store.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient per parameter; `None` where no gradient reached it.
    pub fn grads(&self, g: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| g.try_get(*v).cloned()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter step counts; parameters without a gradient are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            m: store.values.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.values.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        let c = self.config;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if store.frozen[i] {
                continue;
            }
            self.t[i] += 1;
            let b1 = 1.0 - c.beta1.powi(self.t[i] as i32);
            let b2 = 1.0 - c.beta2.powi(self.t[i] as i32);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, g), m), v) in store.values[i]
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * (*m / b1) / ((*v / b2).sqrt() + c.eps);
            }
        }
    }
}
