//! Adam with the warm-up / inverse-square-root learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::ParamRegistry;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup_steps: 100,
        }
    }
}

impl Schedule {
    /// Learning rate for the zero-based `step`: linear rise to `peak_lr` at
    /// the end of warm-up, then decay as `1/sqrt(step)`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = (step + 1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

pub struct Adam {
    params: Vec<(String, Tensor)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    /// Captures the registry's trainable set at construction time.
    pub fn new(reg: &ParamRegistry) -> Self {
        let params: Vec<(String, Tensor)> = reg
            .trainable()
            .into_iter()
            .map(|(n, t)| (n.to_owned(), t.clone()))
            .collect();
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            params,
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((_, p), (m, v)) in self.params.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            // A tensor frozen after construction must stay untouched.
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = p.grad() else { continue };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            p.update_data(|data| {
                for i in 0..data.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    data[i] -= lr * mh / (vh.sqrt() + eps);
                }
            });
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup_end() {
        let s = Schedule { peak_lr: 1.0, warmup_steps: 4 };
        assert_eq!(s.lr(0), 0.25);
        assert_eq!(s.lr(3), 1.0);
        assert!((s.lr(15) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic_and_skips_frozen() {
        let mut reg = ParamRegistry::new();
        let x = reg.register("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let frozen = reg.register("f", Tensor::from_vec(&[1], vec![5.0]).unwrap()).unwrap();
        reg.freeze("f").unwrap();
        let mut opt = Adam::new(&reg);
        assert_eq!(opt.param_names().collect::<Vec<_>>(), vec!["x"]);
        for _ in 0..500 {
            x.square().sum().add(&frozen.square().sum()).unwrap().backward().unwrap();
            opt.step(0.05);
        }
        assert!(x.to_vec().iter().all(|v| v.abs() < 1e-2), "{:?}", x.to_vec());
        assert_eq!(frozen.to_vec(), vec![5.0]);
    }
}
