//! Named parameter storage and first-order optimizers.
//!
//! Parameters are trainable leaf tensors owned by a [`ParamStore`];
//! optimizers update the leaves in place between graph constructions.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::tensor::Tensor;

/// Ordered, name-addressed collection of trainable leaves. Registration
/// order is the canonical parameter order used by optimizers and
/// checkpoints.
#[derive(Default)]
pub struct ParamStore {
    items: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a new trainable leaf. Panics on duplicate names; builders
    /// are responsible for unique prefixes.
    pub fn var(&mut self, name: &str, init: ArrayD<f64>) -> Tensor {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let t = Tensor::var(init);
        self.index.insert(name.to_string(), self.items.len());
        self.items.push((name.to_string(), t.clone()));
        t
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.index.get(name).map(|&i| self.items[i].1.clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.items.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.items.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.items.iter().map(|(_, t)| t.len()).sum()
    }

    /// Overwrites one parameter's value; `false` if the name is unknown.
    /// Shape mismatch panics (the caller validated against its manifest).
    pub fn set(&self, name: &str, value: ArrayD<f64>) -> bool {
        match self.get(name) {
            Some(t) => {
                t.set(value);
                true
            }
            None => false,
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_global_norm(grads: &mut [ArrayD<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Adam with bias correction (β₁=0.9, β₂=0.999, ε=1e-8 unless overridden).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params` (leaf tensors, fixed order across calls)
    /// with matching `grads`.
    pub fn step(&mut self, params: &[Tensor], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.array().raw_dim())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state/param mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let mut val = p.array();
            ndarray::Zip::from(&mut val).and(&*m).and(&*v).for_each(|pv, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
            p.set(val);
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// Moment estimates in parameter order, for checkpoint resume.
    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn load_state(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), v.len(), "moment vectors must align");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Plain gradient descent with optional momentum; `lr` is public so
/// schedules can adjust it between steps.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    vel: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(lr: f64) -> Sgd {
        Sgd {
            lr,
            momentum: 0.0,
            vel: Vec::new(),
        }
    }

    pub fn with_momentum(lr: f64, momentum: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            vel: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[Tensor], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.momentum != 0.0 && self.vel.is_empty() {
            self.vel = params.iter().map(|p| ArrayD::zeros(p.array().raw_dim())).collect();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let mut val = p.array();
            if self.momentum != 0.0 {
                let vel = &mut self.vel[i];
                vel.zip_mut_with(g, |v, &gi| *v = self.momentum * *v + gi);
                val.zip_mut_with(vel, |pv, &v| *pv -= self.lr * v);
            } else {
                val.zip_mut_with(g, |pv, &gi| *pv -= self.lr * gi);
            }
            p.set(val);
        }
    }
}
