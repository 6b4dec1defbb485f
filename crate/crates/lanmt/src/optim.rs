//! Adam with the inverse-square-root warmup schedule used by the base
//! Transformer, plus gradient accumulation and global-norm clipping.

use ndarray::Array2;

use crate::graph::{Gradients, Graph};
use crate::params::{ParamId, ParamStore};

/// lr(step) = factor * hidden^-0.5 * min(step^-0.5, step * warmup^-1.5)
pub fn noam_lr(hidden: usize, factor: f64, warmup: usize, step: usize) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    factor * (hidden as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, v)| Array2::zeros(v.raw_dim())).collect();
        let v = store.iter().map(|(_, _, val)| Array2::zeros(val.raw_dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m,
            v,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.grads.len() {
            let g = &grads.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let value = store.value_mut(ParamId(i));
            for ((p, mi), vi) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Gradient buffers parallel to a `ParamStore`, accumulated over a batch.
pub struct GradAccum {
    grads: Vec<Array2<f64>>,
}

impl GradAccum {
    pub fn new(store: &ParamStore) -> Self {
        let grads = store.iter().map(|(_, _, v)| Array2::zeros(v.raw_dim())).collect();
        Self { grads }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Pull parameter gradients out of a backpropagated graph.
    pub fn absorb(&mut self, graph: &Graph, grads: &Gradients) {
        graph.param_grads(grads, |pid, g| {
            self.grads[pid.0] += g;
        });
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale gradients down so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        if max_norm <= 0.0 {
            return;
        }
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
    }

    pub fn wrt(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id.0]
    }
}

/// Shared knobs for both training loops.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub warmup: usize,
    pub lr_factor: f64,
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            warmup: 600,
            lr_factor: 1.0,
            grad_clip: 1.0,
            log_every: 100,
        }
    }
}
