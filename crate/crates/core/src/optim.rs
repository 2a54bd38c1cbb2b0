//! Parameters, SGD with (Nesterov) momentum and weight decay, and the cosine
//! annealing schedule.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Buffer, Element, GradSlot, Shape, Tensor};

/// A named trainable array with its gradient accumulator and momentum buffer.
#[derive(Debug)]
pub struct Parameter<T: Element> {
    name: String,
    shape: Shape,
    value: RwLock<Arc<Buffer<T>>>,
    grad: Arc<GradSlot<T>>,
    momentum: Mutex<Vec<T>>,
}

pub type ParamRef<T> = Arc<Parameter<T>>;

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: impl Into<Shape>, data: Vec<T>) -> ParamRef<T> {
        let shape = shape.into();
        assert_eq!(shape.numel(), data.len(), "parameter shape/data mismatch");
        Arc::new(Self {
            name: name.into(),
            momentum: Mutex::new(vec![T::zero(); data.len()]),
            shape,
            value: RwLock::new(Arc::new(Buffer::untracked(data))),
            grad: GradSlot::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    /// Graph leaf whose gradient accumulates into this parameter.
    pub fn tensor(&self) -> Tensor<T> {
        let data = self.value.read().expect("param lock poisoned").clone();
        Tensor::param_leaf(data, self.shape.clone(), Some(self.grad.clone()))
    }

    /// Constant view of the current values; builds no graph.
    pub fn frozen(&self) -> Tensor<T> {
        let data = self.value.read().expect("param lock poisoned").clone();
        Tensor::param_leaf(data, self.shape.clone(), None)
    }

    pub fn values(&self) -> Vec<T> {
        self.value.read().expect("param lock poisoned").to_vec()
    }

    pub fn set_values(&self, data: Vec<T>) -> Result<()> {
        ensure!(
            data.len() == self.numel(),
            "parameter {}: {} values for shape {:?}",
            self.name,
            data.len(),
            self.shape
        );
        *self.value.write().expect("param lock poisoned") = Arc::new(Buffer::untracked(data));
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad.get()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_set()
    }

    pub fn zero_grad(&self) {
        self.grad.clear();
    }

    pub fn momentum(&self) -> Vec<T> {
        self.momentum.lock().expect("momentum lock poisoned").clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        Ok(())
    }
}

/// One SGD update with `lr = base_lr · lr_scale`; clears the gradients.
pub fn sgd_step<T: Element>(params: &[ParamRef<T>], cfg: &SgdConfig, lr_scale: f64) -> Result<()> {
    ensure!(lr_scale >= 0.0, "lr_scale must be nonnegative, got {lr_scale}");
    for p in params {
        ensure!(p.has_grad(), "parameter {} has no gradient", p.name);
    }
    let lr = T::lit(cfg.base_lr * lr_scale);
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for p in params {
        let grad = p.grad.take().expect("checked above");
        let mut value = p.value.write().expect("param lock poisoned");
        let w = Arc::make_mut(&mut value);
        let mut v = p.momentum.lock().expect("momentum lock poisoned");
        for i in 0..grad.len() {
            let g = grad[i] + wd * w[i];
            v[i] = mu * v[i] + g;
            let step = if cfg.nesterov { g + mu * v[i] } else { v[i] };
            w[i] = w[i] - lr * step;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config(format!(
                "cosine schedule needs 0 <= lr_min <= lr_max, lr_max > 0 (got {} / {})",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be positive"));
        }
        Ok(())
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, epoch: usize) -> Result<f64> {
    ensure!(
        epoch <= schedule.total_epochs,
        "epoch {epoch} outside schedule of {} epochs",
        schedule.total_epochs
    );
    let t = epoch as f64 / schedule.total_epochs as f64;
    Ok(schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + (PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(w: f64, g: f64) -> ParamRef<f64> {
        let p = Parameter::new("w", [1], vec![w]);
        p.grad.accumulate(&[g]);
        p
    }

    fn cfg(lr: f64, momentum: f64, nesterov: bool, wd: f64) -> SgdConfig {
        SgdConfig {
            base_lr: lr,
            momentum,
            nesterov,
            weight_decay: wd,
        }
    }

    #[test]
    fn vanilla_step() {
        let p = param_with_grad(1.0, 1.0);
        sgd_step(&[p.clone()], &cfg(0.1, 0.0, false, 0.0), 1.0).unwrap();
        assert!((p.values()[0] - 0.9).abs() < 1e-15);
        assert!(!p.has_grad());
    }

    #[test]
    fn heavy_ball_two_steps() {
        let c = cfg(0.1, 0.9, false, 0.0);
        let p = param_with_grad(1.0, 1.0);
        sgd_step(&[p.clone()], &c, 1.0).unwrap();
        assert!((p.momentum()[0] - 1.0).abs() < 1e-15);
        assert!((p.values()[0] - 0.9).abs() < 1e-15);
        p.grad.accumulate(&[1.0]);
        sgd_step(&[p.clone()], &c, 1.0).unwrap();
        assert!((p.momentum()[0] - 1.9).abs() < 1e-12);
        assert!((p.values()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn nesterov_step() {
        // v = 1, step = g + mu·v = 1.9
        let p = param_with_grad(1.0, 1.0);
        sgd_step(&[p.clone()], &cfg(0.1, 0.9, true, 0.0), 1.0).unwrap();
        assert!((p.values()[0] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn pure_weight_decay() {
        let p = param_with_grad(1.0, 0.0);
        sgd_step(&[p.clone()], &cfg(0.1, 0.0, false, 0.1), 1.0).unwrap();
        assert!((p.values()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn lr_scale_multiplies() {
        let p = param_with_grad(1.0, 1.0);
        sgd_step(&[p.clone()], &cfg(0.1, 0.0, false, 0.0), 0.5).unwrap();
        assert!((p.values()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_error() {
        let p = Parameter::<f64>::new("w", [1], vec![1.0]);
        assert!(sgd_step(&[p], &SgdConfig::default(), 1.0).is_err());
    }

    #[test]
    fn step_does_not_disturb_live_graph_values() {
        let p = param_with_grad(1.0, 1.0);
        let snapshot = p.tensor();
        sgd_step(&[p.clone()], &cfg(0.1, 0.0, false, 0.0), 1.0).unwrap();
        assert_eq!(snapshot.data(), &[1.0]);
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            lr_max: 0.8,
            lr_min: 0.0,
            total_epochs: 10,
        };
        assert_eq!(cosine_lr(&s, 0).unwrap(), 0.8);
        assert!(cosine_lr(&s, 10).unwrap().abs() < 1e-15);
        assert!((cosine_lr(&s, 5).unwrap() - 0.4).abs() < 1e-15);
        assert!(cosine_lr(&s, 11).is_err());
    }

    #[test]
    fn cosine_with_floor() {
        let s = CosineSchedule {
            lr_max: 1.0,
            lr_min: 0.2,
            total_epochs: 4,
        };
        assert!((cosine_lr(&s, 4).unwrap() - 0.2).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn cosine_is_non_increasing(lr_max in 1e-4f64..10.0, frac in 0.0f64..1.0, total in 1usize..500) {
            let s = CosineSchedule { lr_max, lr_min: lr_max * frac, total_epochs: total };
            let mut prev = f64::INFINITY;
            for e in 0..=total {
                let lr = cosine_lr(&s, e).unwrap();
                proptest::prop_assert!(lr <= prev + 1e-15);
                proptest::prop_assert!(lr >= s.lr_min - 1e-12 && lr <= s.lr_max + 1e-12);
                prev = lr;
            }
        }
    }
}
