//! Bias-corrected Adam.

use crate::layers::Params;
use crate::tensor::Real;

pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter of `model` using its accumulated
    /// gradients. Parameter visitation order is fixed by the model
    /// structure, so optimizer state stays aligned across steps.
    pub fn step(&mut self, model: &mut dyn Params<T>) {
        self.t += 1;
        let t = self.t;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let bc1 = T::one() - b1.powi(t as i32);
        let bc2 = T::one() - b2.powi(t as i32);
        let m_state = &mut self.m;
        let v_state = &mut self.v;
        let mut idx = 0usize;
        model.visit_params("", &mut |_, p| {
            if m_state.len() == idx {
                m_state.push(vec![T::zero(); p.value.numel()]);
                v_state.push(vec![T::zero(); p.value.numel()]);
            }
            let m = &mut m_state[idx];
            let v = &mut v_state[idx];
            assert_eq!(m.len(), p.value.numel(), "model changed under optimizer");
            for i in 0..p.value.numel() {
                let g = p.grad.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}
