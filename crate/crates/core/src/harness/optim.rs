use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to `lr·min_lr_ratio` at the last step.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear ramp from 0 over this many steps, then constant.
    pub warmup_steps: u64,
    /// Applied after warmup.
    pub schedule: Schedule,
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            schedule: Schedule::Constant,
            min_lr_ratio: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("weight decay must be non-negative and betas in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("min_lr_ratio must lie in [0, 1]".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at 1-based `step` of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = (step.saturating_sub(self.warmup_steps) as f64 / span).min(1.0);
                let floor = self.lr * self.min_lr_ratio;
                floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// First and second moments, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect::<Vec<_>>();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update with decoupled decay: `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
///
/// Missing gradients count as zero. Any non-finite gradient aborts before anything changes.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    hyper: &OptimConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (id, name, t) in store.iter() {
        if let Some(g) = &grads[id.index()] {
            if g.shape() != t.shape() {
                return Err(Error::shape("adamw_step", t.shape(), g.shape()));
            }
            if let Some(i) = g.first_non_finite() {
                return Err(Error::NonFiniteValue {
                    what: format!("gradient of {name} at element {i}"),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = T::lit(1.0 - b1.powi(t));
    let c2 = T::lit(1.0 - b2.powi(t));
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let (one, eps) = (T::one(), T::lit(hyper.eps));
    let decay = T::lit(1.0 - lr * hyper.weight_decay);
    let lr = T::lit(lr);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.value_mut(id).data_mut();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = grads[i].as_ref().map(|g| g.data());
        for k in 0..p.len() {
            let gk = g.map_or(T::zero(), |g| g[k]);
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            p[k] = p[k] * decay - lr * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64([v.len()], v).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = one_param(&[1.0, -2.0]);
        let mut st = AdamState::new(&s);
        let h = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut s, &[Some(Tensor::zeros([2]))], &mut st, &h, 0.1).unwrap();
        assert_eq!(s.get(s.id("w").unwrap()).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = one_param(&[0.5, 0.5, 0.5]);
        let mut st = AdamState::new(&s);
        let h = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = [3.0, -0.25, 1e-3];
        adamw_step(&mut s, &[Some(Tensor::from_f64([3], &g).unwrap())], &mut st, &h, 0.01).unwrap();
        for (p, g) in s.get(s.id("w").unwrap()).data().iter().zip(g) {
            let want = 0.5 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_only_shrinks() {
        let mut s = one_param(&[2.0]);
        let mut st = AdamState::new(&s);
        let h = OptimConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut s, &[None], &mut st, &h, 0.5).unwrap();
        assert!((s.get(s.id("w").unwrap()).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = one_param(&[1.0]);
        let mut st = AdamState::new(&s);
        let e = adamw_step(&mut s, &[Some(Tensor::from_f64([1], &[f64::NAN]).unwrap())], &mut st, &Default::default(), 0.1)
            .unwrap_err();
        assert!(e.to_string().contains('w'));
        assert_eq!(st.step, 0);
        assert_eq!(s.get(s.id("w").unwrap()).data(), &[1.0]);
    }

    #[test]
    fn warmup_ramps() {
        let h = OptimConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..Default::default()
        };
        assert_eq!(h.lr_at(1, 100), 0.25);
        assert_eq!(h.lr_at(4, 100), 1.0);
        assert_eq!(h.lr_at(100, 100), 1.0);
    }

    #[test]
    fn cosine_ends_at_floor() {
        let h = OptimConfig {
            lr: 1.0,
            warmup_steps: 10,
            schedule: Schedule::Cosine,
            min_lr_ratio: 0.1,
            ..Default::default()
        };
        assert_eq!(h.lr_at(10, 110), 1.0);
        assert!((h.lr_at(60, 110) - 0.55).abs() < 1e-12);
        assert!((h.lr_at(110, 110) - 0.1).abs() < 1e-12);
    }
}
