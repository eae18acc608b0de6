//! Named parameter storage with optimizer state.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub m: ArrayD<f32>,
    pub v: ArrayD<f32>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f32>, trainable: bool) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        let idx = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            m,
            v,
            trainable,
        });
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        &self.params[self.idx(name)].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        let i = self.idx(name);
        &mut self.params[i].value
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Flip trainability for every parameter whose name matches.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Byte-exact snapshot of a subset, for frozen-weights contracts.
    pub fn snapshot(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, Vec<f32>)> {
        self.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| (p.name.clone(), p.value.iter().copied().collect()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn reset_optimizer_state(&mut self) {
        for p in &mut self.params {
            p.m.fill(0.0);
            p.v.fill(0.0);
        }
    }
}

/// Provides parameter values to a tape being built. The store itself is
/// the live source; the gradient checker substitutes a perturbed copy.
pub trait ParamSource<E: Element> {
    /// Insert `name` into the tape: a `Param` leaf if trainable, a
    /// constant otherwise (gradients still flow *through* frozen
    /// parameters' ops, they just are not collected for them).
    fn node(&self, tape: &mut Tape<E>, name: &str) -> NodeId;
}

fn cast<E: Element>(a: &ArrayD<f32>) -> ArrayD<E> {
    a.mapv(|v| E::from_f64(v as f64))
}

impl<E: Element> ParamSource<E> for ParamStore {
    fn node(&self, tape: &mut Tape<E>, name: &str) -> NodeId {
        let idx = self.idx(name);
        let p = &self.params[idx];
        if p.trainable {
            tape.param(idx, cast(&p.value))
        } else {
            tape.constant(cast(&p.value))
        }
    }
}

/// An f64 copy of a store's values that can be perturbed coordinate-wise.
pub struct PerturbedParams {
    pub values: Vec<ArrayD<f64>>,
    pub trainable: Vec<bool>,
    pub names: HashMap<String, usize>,
}

impl PerturbedParams {
    pub fn from_store(store: &ParamStore) -> Self {
        let values = store
            .params
            .iter()
            .map(|p| p.value.mapv(|v| v as f64))
            .collect();
        let trainable = store.params.iter().map(|p| p.trainable).collect();
        let names = store.index.clone();
        PerturbedParams {
            values,
            trainable,
            names,
        }
    }

    pub fn nudge(&mut self, idx: usize, flat: usize, delta: f64) {
        self.values[idx].as_slice_mut().unwrap()[flat] += delta;
    }
}

impl ParamSource<f64> for PerturbedParams {
    fn node(&self, tape: &mut Tape<f64>, name: &str) -> NodeId {
        let idx = *self.names.get(name).expect("unknown parameter");
        if self.trainable[idx] {
            tape.param(idx, self.values[idx].clone())
        } else {
            tape.constant(self.values[idx].clone())
        }
    }
}

/// Adaptive moment estimation with bias correction and optional global
/// gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<usize, ArrayD<f32>>,
    ) -> Result<()> {
        self.step += 1;
        let mut scale = 1.0f32;
        if let Some(max_norm) = self.clip_norm {
            let mut sq = 0.0f64;
            for g in grads.values() {
                sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::Training("non-finite gradient norm".into()));
            }
            if norm > max_norm {
                scale = (max_norm / norm) as f32;
            }
        }
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - (self.beta1).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2).powi(self.step as i32);
        let lr = self.lr as f32;
        let eps = self.eps as f32;
        for (&idx, grad) in grads {
            let p = &mut store.params[idx];
            if !p.trainable {
                continue;
            }
            debug_assert_eq!(p.value.shape(), grad.shape());
            let (vs, ms, vvs, gs) = (
                p.value.as_slice_mut().unwrap(),
                p.m.as_slice_mut().unwrap(),
                p.v.as_slice_mut().unwrap(),
                grad.as_slice().unwrap(),
            );
            for i in 0..vs.len() {
                let g = gs[i] * scale;
                ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                vvs[i] = b2 * vvs[i] + (1.0 - b2) * g * g;
                let mhat = ms[i] / bc1 as f32;
                let vhat = vvs[i] / bc2 as f32;
                vs[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        if !store.all_finite() {
            return Err(Error::Training("non-finite parameter after update".into()));
        }
        Ok(())
    }
}
