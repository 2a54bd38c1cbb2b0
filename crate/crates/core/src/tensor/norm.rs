use std::sync::Mutex;

use super::{Buffer, Element, GradFn, Tensor};
use crate::error::{ensure, Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running mean and (unbiased) variance per channel.
#[derive(Debug)]
pub struct RunningStats<T> {
    mean: Mutex<Vec<T>>,
    var: Mutex<Vec<T>>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Mutex::new(vec![T::zero(); channels]),
            var: Mutex::new(vec![T::one(); channels]),
        }
    }

    pub fn mean(&self) -> Vec<T> {
        self.mean.lock().expect("bn stats poisoned").clone()
    }

    pub fn var(&self) -> Vec<T> {
        self.var.lock().expect("bn stats poisoned").clone()
    }

    pub fn set(&self, mean: Vec<T>, var: Vec<T>) {
        *self.mean.lock().expect("bn stats poisoned") = mean;
        *self.var.lock().expect("bn stats poisoned") = var;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; optionally fold them into the running stats.
    Train { update_running: bool },
    /// Normalize with running statistics.
    Eval,
}

struct BnFn<T> {
    dims: (usize, usize, usize, usize),
    xhat: Buffer<T>,
    invstd: Vec<T>,
    batch_stats: bool,
}

impl<T: Element> GradFn<T> for BnFn<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, g: &[T], p: &[Tensor<T>], _: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (n, c, h, w) = self.dims;
        let hw = h * w;
        let m = (n * hw) as f64;
        let gamma = p[1].data();
        let mut sum_g = vec![0f64; c];
        let mut sum_gx = vec![0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let gv = g[i].to_f64().unwrap_or(0.0);
                    sum_g[ch] += gv;
                    sum_gx[ch] += gv * self.xhat[i].to_f64().unwrap_or(0.0);
                }
            }
        }
        let dx = p[0].requires_grad().then(|| {
            let mut dx = vec![T::zero(); g.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    let scale = gamma[ch] * self.invstd[ch];
                    if self.batch_stats {
                        let mg = T::lit(sum_g[ch] / m);
                        let mgx = T::lit(sum_gx[ch] / m);
                        for i in off..off + hw {
                            dx[i] = scale * (g[i] - mg - self.xhat[i] * mgx);
                        }
                    } else {
                        for i in off..off + hw {
                            dx[i] = scale * g[i];
                        }
                    }
                }
            }
            dx
        });
        let dgamma = p[1]
            .requires_grad()
            .then(|| sum_gx.iter().map(|&v| T::lit(v)).collect());
        let dbeta = p[2]
            .requires_grad()
            .then(|| sum_g.iter().map(|&v| T::lit(v)).collect());
        Ok(vec![dx, dgamma, dbeta])
    }
}

/// Per-channel batch normalization over (N, H, W).
pub fn batchnorm2d<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x
        .shape()
        .nchw()
        .ok_or_else(|| Error::contract(format!("batchnorm2d needs NCHW, got {:?}", x.shape())))?;
    ensure!(
        gamma.dims() == [c] && beta.dims() == [c],
        "batchnorm2d: affine params {:?}/{:?} for {c} channels",
        gamma.shape(),
        beta.shape()
    );
    let hw = h * w;
    let m = n * hw;
    let data = x.data();
    let (mean, var) = match mode {
        BnMode::Train { update_running } => {
            let mut mean = vec![0f64; c];
            let mut var = vec![0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    mean[ch] += data[off..off + hw]
                        .iter()
                        .map(|v| v.to_f64().unwrap_or(f64::NAN))
                        .sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    var[ch] += data[off..off + hw]
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap_or(f64::NAN) - mean[ch];
                            d * d
                        })
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            if update_running {
                let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                let mut rm = stats.mean.lock().expect("bn stats poisoned");
                let mut rv = stats.var.lock().expect("bn stats poisoned");
                for ch in 0..c {
                    rm[ch] = T::lit(
                        (1.0 - BN_MOMENTUM) * rm[ch].to_f64().unwrap_or(0.0) + BN_MOMENTUM * mean[ch],
                    );
                    rv[ch] = T::lit(
                        (1.0 - BN_MOMENTUM) * rv[ch].to_f64().unwrap_or(1.0)
                            + BN_MOMENTUM * var[ch] * unbiased,
                    );
                }
            }
            (mean, var)
        }
        BnMode::Eval => (
            stats.mean().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect(),
            stats.var().iter().map(|v| v.to_f64().unwrap_or(1.0)).collect(),
        ),
    };
    let invstd: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + BN_EPS).sqrt())).collect();
    let mean: Vec<T> = mean.iter().map(|&v| T::lit(v)).collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (data[i] - mean[ch]) * invstd[ch];
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
    }
    let needs_graph = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let xhat = if needs_graph {
        Buffer::tracked(xhat)
    } else {
        Buffer::untracked(Vec::new())
    };
    Ok(Tensor::from_op(
        out,
        x.shape().clone(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        BnFn {
            dims: (n, c, h, w),
            xhat,
            invstd,
            batch_stats: matches!(mode, BnMode::Train { .. }),
        },
    ))
}
