//! Adam with decoupled weight decay.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamWState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |_: ()| -> Vec<Matrix> {
            params
                .entries()
                .iter()
                .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }
}

/// One update of every trainable tensor at learning rate `lr`.
///
/// Weight decay is applied as `p *= 1 - lr * weight_decay` before the
/// bias-corrected moment step. Frozen tensors are left untouched.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape {
            op: "optimizer_step",
            left: (params.len(), 1),
            right: (grads.len(), 1),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let decay = 1.0 - lr * cfg.weight_decay;
    for idx in 0..params.len() {
        if !params.is_trainable(idx) {
            continue;
        }
        let g = grads.get(idx);
        let p = params.get_mut(idx);
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        for (((pk, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
            let mhat = *mk / bc1;
            let vhat = *vk / bc2;
            *pk *= decay;
            *pk -= lr * mhat / (libm::sqrt(vhat) + cfg.eps);
        }
    }
    Ok(())
}

/// Step-decay schedule: `base` until `drop_epoch`, then `base * factor`.
pub fn scheduled_lr(base: f64, epoch: usize, drop_epoch: usize, factor: f64) -> f64 {
    if epoch >= drop_epoch {
        base * factor
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Matrix::row_vector(v));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let g = GradStore::zeros_like(&p);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..5 {
            optimizer_step(&mut p, &g, &mut st, &cfg, cfg.lr).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let mut p = store(&[1.0, -2.0]);
        let g = GradStore::zeros_like(&p);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut expect = [1.0, -2.0];
        for _ in 0..3 {
            optimizer_step(&mut p, &g, &mut st, &cfg, cfg.lr).unwrap();
            expect.iter_mut().for_each(|e| *e *= 1.0 - 0.01 * 0.5);
            assert_eq!(p.get(0).data(), &expect);
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = store(&[0.0, 0.0]);
        let mut g = GradStore::zeros_like(&p);
        g.get_mut(0).data_mut().copy_from_slice(&[3.0, -0.25]);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut prev = [0.0, 0.0];
        for _ in 0..200 {
            optimizer_step(&mut p, &g, &mut st, &cfg, cfg.lr).unwrap();
            let now = p.get(0).data();
            let step = [now[0] - prev[0], now[1] - prev[1]];
            // with a constant gradient the bias-corrected ratio is exactly g/|g|
            assert!((step[0] + 1e-3).abs() < 1e-9, "{step:?}");
            assert!((step[1] - 1e-3).abs() < 1e-9, "{step:?}");
            prev = [now[0], now[1]];
        }
    }

    #[test]
    fn nan_gradient_fails_fast() {
        let mut p = store(&[1.0]);
        let mut g = GradStore::zeros_like(&p);
        g.get_mut(0).data_mut()[0] = f64::NAN;
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig::default();
        assert!(optimizer_step(&mut p, &g, &mut st, &cfg, cfg.lr).is_err());
    }

    #[test]
    fn frozen_tensor_untouched() {
        let mut p = store(&[1.0]);
        p.set_trainable(0, false);
        let mut g = GradStore::zeros_like(&p);
        g.get_mut(0).data_mut()[0] = 1.0;
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig::default();
        optimizer_step(&mut p, &g, &mut st, &cfg, cfg.lr).unwrap();
        assert_eq!(p.get(0).data(), &[1.0]);
    }

    #[test]
    fn schedule_drops_at_epoch() {
        assert_eq!(scheduled_lr(2e-4, 9, 10, 0.1), 2e-4);
        assert!((scheduled_lr(2e-4, 10, 10, 0.1) - 2e-5).abs() < 1e-20);
    }
}
