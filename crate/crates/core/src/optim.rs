//! Adam and learning-rate schedules.

use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPSILON: f64 = 1e-9;

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        Adam {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            weight_decay,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let update = (*mj / bc1) / ((*vj / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Fixed(f64),
    /// Linear warmup to `peak`, then exponential decay reaching
    /// `peak * final_ratio` at `total` steps.
    WarmupExp {
        warmup: u64,
        peak: f64,
        total: u64,
        final_ratio: f64,
    },
}

impl LrSchedule {
    /// Rate for the update numbered `step` (0-based).
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Fixed(lr) => lr,
            LrSchedule::WarmupExp {
                warmup,
                peak,
                total,
                final_ratio,
            } => {
                if step < warmup {
                    peak * (step + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    let frac = ((step - warmup) as f64 / span).min(1.0);
                    peak * final_ratio.powf(frac)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::WarmupExp {
            warmup: 10,
            peak: 1.0,
            total: 110,
            final_ratio: 0.01,
        };
        assert!((s.at(0) - 0.1).abs() < 1e-15);
        assert!((s.at(9) - 1.0).abs() < 1e-15);
        assert!((s.at(10) - 1.0).abs() < 1e-15);
        assert!((s.at(60) - 0.1).abs() < 1e-12);
        assert!((s.at(110) - 0.01).abs() < 1e-12);
        assert_eq!(LrSchedule::Fixed(0.5).at(1000), 0.5);
    }
}
