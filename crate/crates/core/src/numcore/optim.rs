use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step and bound to the order in which parameter slots are passed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over every `(param, grad)` slot.
    pub fn step<'a, I>(&mut self, slots: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut [f64], &'a [f64])>,
    {
        let slots: Vec<_> = slots.into_iter().collect();
        if self.first.is_empty() {
            self.first = slots.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if slots.len() != self.first.len() {
            return Err(Error::Dimension {
                context: "Adam parameter slots",
                expected: self.first.len(),
                actual: slots.len(),
            });
        }
        for ((p, g), m) in slots.iter().zip(&self.first) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Dimension {
                    context: "Adam parameter/gradient length",
                    expected: m.len(),
                    actual: if p.len() != m.len() { p.len() } else { g.len() },
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((param, grad), (m, v)) in slots
            .into_iter()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `base_lr · gamma^⌊epoch / step_size⌋`, epochs counted from 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, step_size: usize, gamma: f64) -> Result<Self> {
        if !(base_lr > 0.0) || step_size == 0 || !(gamma > 0.0) {
            return Err(Error::Config(format!(
                "lr schedule needs base_lr > 0, step_size >= 1, gamma > 0 (got {base_lr}, {step_size}, {gamma})"
            )));
        }
        Ok(LrSchedule {
            base_lr,
            step_size,
            gamma,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.gamma.powi((epoch / self.step_size) as i32)
    }
}
