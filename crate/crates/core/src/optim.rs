//! Adam, cosine learning-rate annealing and global-norm gradient clipping.

use crate::params::ParamStore;
use crate::tensor::Tensor;

const EPS: f64 = 1e-8;

/// `lr_final + ½(lr_initial − lr_final)(1 + cos(π t / T))`, held at
/// `lr_final` for `t ≥ T`.
pub fn cosine_lr(step: usize, total: usize, lr_initial: f64, lr_final: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_final;
    }
    let t = step as f64 / total as f64;
    lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            beta1,
            beta2,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr`. `grads` follows store
    /// order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }
}

/// Euclidean norm over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping and whether clipping happened.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, bool) {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(k);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}
