//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 7e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas ({}, {}) must lie in (0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// Moment estimates for every trainable entry of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Element> {
    cfg: AdamConfig,
    steps: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |i: usize| match store.kind(i) {
            EntryKind::Param => Some(Tensor::zeros(store.value(i).shape())),
            EntryKind::Buffer => None,
        };
        Adam {
            cfg,
            steps: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Missing gradients count as zero; the decay
    /// `theta *= 1 - lr * weight_decay` is applied to every parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} entries, store has {}, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.cfg.weight_decay;
        for i in 0..store.len() {
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let theta = store.value_mut(i);
            if let Some(g) = &grads[i] {
                if g.shape() != theta.shape() {
                    return Err(Error::shape(format!(
                        "gradient {:?} does not match parameter {:?}",
                        g.shape(),
                        theta.shape()
                    )));
                }
            }
            let gd = grads[i].as_ref().map(|g| g.data());
            let md = m.data_mut();
            let vd = v.data_mut();
            for (j, p) in theta.data_mut().iter_mut().enumerate() {
                let g = gd.map_or(0.0, |g| g[j].to_f64().unwrap_or(f64::NAN));
                let mj = b1 * md[j].to_f64().unwrap_or(0.0) + (1.0 - b1) * g;
                let vj = b2 * vd[j].to_f64().unwrap_or(0.0) + (1.0 - b2) * g * g;
                md[j] = T::lit(mj);
                vd[j] = T::lit(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.cfg.eps);
                *p = T::lit(p.to_f64().unwrap_or(f64::NAN) * decay - update);
            }
        }
        Ok(())
    }

    pub fn state(&self) -> AdamState<T> {
        AdamState {
            steps: self.steps,
            m: self.m.iter().map(|t| t.as_ref().map(|t| t.data().to_vec())).collect(),
            v: self.v.iter().map(|t| t.as_ref().map(|t| t.data().to_vec())).collect(),
        }
    }

    pub fn load_state(&mut self, s: AdamState<T>) -> Result<()> {
        if s.m.len() != self.m.len() || s.v.len() != self.v.len() {
            return Err(Error::Format("optimizer state does not match the network".into()));
        }
        for (dst, src) in self.m.iter_mut().chain(self.v.iter_mut()).zip(s.m.into_iter().chain(s.v)) {
            match (dst, src) {
                (Some(d), Some(s)) if d.numel() == s.len() => d.data_mut().copy_from_slice(&s),
                (None, None) => {}
                _ => return Err(Error::Format("optimizer moment shapes do not match".into())),
            }
        }
        self.steps = s.steps;
        Ok(())
    }
}

/// Flat copy of the optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub steps: u64,
    pub m: Vec<Option<Vec<T>>>,
    pub v: Vec<Option<Vec<T>>>,
}
