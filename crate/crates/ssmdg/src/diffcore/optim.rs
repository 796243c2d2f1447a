use serde::{Deserialize, Serialize};

use super::{DiffError, GradientMap, ParamMap, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// AdamW with decoupled weight decay:
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub hyper: AdamWHyper,
    step: u64,
    first_moment: ParamMap,
    second_moment: ParamMap,
}

impl AdamWState {
    pub fn new(hyper: AdamWHyper) -> Self {
        AdamWState {
            hyper,
            step: 0,
            first_moment: ParamMap::new(),
            second_moment: ParamMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step in place. Bias correction uses the incremented
    /// step counter.
    pub fn step(&mut self, params: &mut ParamMap, grads: &GradientMap) -> Result<()> {
        for key in grads.keys() {
            if !params.contains_key(key) {
                return Err(DiffError::KeyMismatch(key.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);

        for (key, theta) in params.iter_mut() {
            let g = match grads.get(key) {
                Some(g) => g,
                None => return Err(DiffError::KeyMismatch(key.clone())),
            };
            let m = self
                .first_moment
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            let v = self
                .second_moment
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            for ((tv, gv), (mv, vv)) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = h.beta1 * *mv + (1.0 - h.beta1) * gv;
                *vv = h.beta2 * *vv + (1.0 - h.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *tv -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * *tv);
            }
        }
        Ok(())
    }
}
