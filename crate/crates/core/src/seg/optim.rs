//! AdamW with decoupled weight decay, and the warmup + poly learning-rate
//! schedule used by the fine-tuning loop.

use ndarray::ArrayD;

use morsel_autograd::{ParamId, ParamStore};

use crate::error::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment accumulators plus a step counter.
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    moments: Vec<Option<(ArrayD<f64>, ArrayD<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update:
    ///   m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
    ///   mhat = m/(1-b1^t);     vhat = v/(1-b2^t)
    ///   theta <- theta - lr * (mhat/(sqrt(vhat)+eps) + wd*theta)
    /// Weight decay is decoupled: it multiplies theta directly and never
    /// enters the moments. Non-finite gradients abort.
    pub fn step(
        &mut self,
        ps: &mut ParamStore,
        grads: &[(ParamId, ArrayD<f64>)],
        lr: f64,
    ) -> Result<()> {
        for (pid, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient for parameter {}", ps.name(*pid)),
                    step: self.step,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, wd) = (self.config.beta1, self.config.beta2, self.config.weight_decay);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (pid, g) in grads {
            if self.moments.len() <= pid.0 {
                self.moments.resize_with(pid.0 + 1, || None);
            }
            let slot = &mut self.moments[pid.0];
            if slot.is_none() {
                *slot = Some((ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            }
            let (m, v) = slot.as_mut().unwrap();
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let theta = ps.value_mut(*pid);
            ndarray::Zip::from(&mut *theta)
                .and(&*m)
                .and(&*v)
                .for_each(|t, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *t -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * *t);
                });
        }
        Ok(())
    }
}

/// Learning-rate schedule: linear warmup to `base` over `warmup` steps
/// (lr(t) = base*(t+1)/warmup so step 0 is not wasted on a zero rate), then
/// polynomial decay base*(1 - (t-warmup)/(total-warmup))^power.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
    pub power: f64,
}

impl LrSchedule {
    pub fn poly(base: f64, warmup: u64, total: u64) -> Self {
        Self {
            base,
            warmup,
            total,
            power: 0.9,
        }
    }

    pub fn constant(base: f64) -> Self {
        Self {
            base,
            warmup: 0,
            total: u64::MAX,
            power: 0.0,
        }
    }

    pub fn at(&self, t: u64) -> f64 {
        if t < self.warmup {
            self.base * (t + 1) as f64 / self.warmup as f64
        } else if self.power == 0.0 {
            self.base
        } else {
            let span = (self.total - self.warmup).max(1) as f64;
            let frac = 1.0 - (t - self.warmup) as f64 / span;
            self.base * frac.max(0.0).powf(self.power)
        }
    }
}
