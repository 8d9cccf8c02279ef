//! AdamW with decoupled weight decay, and the warmup/cosine LR schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Float, Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    pub weight_decay: Float,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<Float>,
    pub v: Vec<Float>,
}

/// First/second moment estimates per parameter plus the step count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter in `params`. Parameters without a
    /// gradient entry are treated as having zero gradient. Weight decay applies
    /// only to matrices (rank >= 2).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, cfg: &AdamWConfig) -> Result<()> {
        if !(cfg.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            if mom.m.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape.clone(),
                    rhs: vec![mom.m.len()],
                });
            }
            let g = grads.get(name);
            let decay = if p.shape.len() >= 2 { cfg.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gi;
                mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                if decay != 0.0 {
                    p.data[i] -= cfg.lr * decay * p.data[i];
                }
                p.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Moment rows for a parameter that grew along axis 0 (vocab resize).
    pub fn grow_rows(&mut self, name: &str, new_len: usize) {
        if let Some(m) = self.moments.get_mut(name) {
            m.m.resize(new_len, 0.0);
            m.v.resize(new_len, 0.0);
        }
    }
}

/// Linear warmup from `min_lr` to `max_lr`, then cosine decay back to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub min_lr: Float,
    pub max_lr: Float,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> Float {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            let f = step as Float / self.warmup_steps as Float;
            return self.min_lr + (self.max_lr - self.min_lr) * f;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let f = ((step - self.warmup_steps.min(step)) as Float / decay_steps as Float).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI as Float * f).cos());
        self.min_lr + (self.max_lr - self.min_lr) * cos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Param;

    fn single(p: Float) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Param::new(&[1], vec![p]).unwrap());
        s
    }

    fn grads(g: Float) -> Gradients {
        let mut store = single(0.0);
        let binder = crate::tensor::Binder::new(&store, true);
        let t = binder.get("p").unwrap();
        t.scale(g).unwrap().sum().unwrap().backward().unwrap();
        let out = binder.gradients();
        store.remove("p");
        out
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = single(0.37);
        let mut st = AdamWState::new();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..5 {
            st.step(&mut params, &Gradients::default(), &cfg).unwrap();
        }
        assert_eq!(params.get("p").unwrap().data, vec![0.37]);
    }

    #[test]
    fn single_step_hand_evaluated() {
        let mut params = single(1.0);
        let mut st = AdamWState::new();
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.0, beta2: 0.0, eps: 1e-8, weight_decay: 0.0 };
        st.step(&mut params, &grads(1.0), &cfg).unwrap();
        // m̂ = 1, v̂ = 1, p = 1 - 0.1 * 1 / (1 + 1e-8)
        let p = params.get("p").unwrap().data[0];
        assert!((p - 0.9).abs() < 1e-8, "{p}");
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut params = single(1.0);
        let mut st = AdamWState::new();
        for lr in [0.0, -1e-3, Float::NAN] {
            let cfg = AdamWConfig { lr, ..Default::default() };
            assert!(st.step(&mut params, &Gradients::default(), &cfg).is_err());
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut params = single(0.5);
            let mut st = AdamWState::new();
            let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
            for i in 0..10 {
                st.step(&mut params, &grads(0.3 * i as Float - 1.0), &cfg).unwrap();
            }
            params.get("p").unwrap().data[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { min_lr: 1e-5, max_lr: 3e-5, warmup_steps: 10, total_steps: 110 };
        assert_eq!(s.at(0), 1e-5);
        assert!((s.at(10) - 3e-5).abs() < 1e-18);
        assert!((s.at(110) - 1e-5).abs() < 1e-18);
        assert!((s.at(1000) - 1e-5).abs() < 1e-18);
        let mid = s.at(60);
        assert!(mid > 1e-5 && mid < 3e-5);
    }
}
