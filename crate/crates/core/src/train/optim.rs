//! Adam with bias correction, learning-rate schedules, and the weight EMA.

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::net::CmParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `α_ref / √max(step / t_ref, 1)`.
    InverseSqrt {
        alpha_ref: f64,
        t_ref: f64,
    },
}

impl LrSchedule {
    /// Learning rate at a 1-based step.
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::InverseSqrt { alpha_ref, t_ref } => {
                alpha_ref / (step as f64 / t_ref).max(1.0).sqrt()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    pub step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(params: &CmParams, schedule: LrSchedule) -> Self {
        let zeros: Vec<Array> = params
            .named_arrays()
            .iter()
            .map(|(_, a)| Array::zeros(a.shape()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update in place; returns the learning rate used.
    pub fn update(&mut self, params: &mut CmParams, grads: &[Array]) -> Result<f64> {
        let names: Vec<String> = params.named_arrays().into_iter().map(|(n, _)| n).collect();
        if grads.len() != names.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                names.len()
            )));
        }
        for ((name, g), m) in names.iter().zip(grads).zip(&self.m) {
            if g.shape() != m.shape() {
                return Err(Error::dim(format!(
                    "gradient for {name} has shape {:?}",
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        self.step += 1;
        let lr = self.schedule.lr(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .arrays_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

/// Exponential moving average of the weights.
#[derive(Clone, Debug)]
pub struct Ema {
    pub beta: f64,
    pub shadow: CmParams,
}

impl Ema {
    pub fn new(params: &CmParams, beta: f64) -> Self {
        Ema {
            beta,
            shadow: params.clone(),
        }
    }

    /// `shadow ← β·shadow + (1−β)·params`.
    pub fn update(&mut self, params: &CmParams) {
        let b = self.beta;
        for (s, (_, p)) in self
            .shadow
            .arrays_mut()
            .into_iter()
            .zip(params.named_arrays())
        {
            for (si, &pi) in s.data_mut().iter_mut().zip(p.data()) {
                *si = b * *si + (1.0 - b) * pi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Arch, CoeffSpec};

    fn params() -> CmParams {
        let arch = Arch {
            dim: 2,
            hidden: vec![4],
            fourier: 2,
            fourier_scale: 1.0,
        };
        init_params(1, &arch, CoeffSpec { sigma_data: 0.5 }).unwrap()
    }

    fn grads_like(p: &CmParams, v: f64) -> Vec<Array> {
        p.named_arrays()
            .iter()
            .map(|(_, a)| Array::full(a.shape(), v))
            .collect()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Adam::new(&p, LrSchedule::Constant(0.1));
        opt.update(&mut p, &grads_like(&before, 0.0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for (b1, b2) in [(0.9, 0.999), (0.5, 0.9), (0.0, 0.0)] {
            let mut p = params();
            let before = p.flatten();
            let mut opt = Adam::new(&p, LrSchedule::Constant(0.01));
            opt.beta1 = b1;
            opt.beta2 = b2;
            let g = grads_like(&p, 3.7);
            opt.update(&mut p, &g).unwrap();
            for (a, b) in p.flatten().iter().zip(&before) {
                assert!(((b - a) - 0.01).abs() < 1e-8, "{}", b - a);
            }
        }
    }

    #[test]
    fn descends_a_parabola() {
        let mut p = params();
        let mut opt = Adam::new(&p, LrSchedule::Constant(0.1));
        p.layers[0].bias.data_mut()[0] = 1.0;
        let g: Vec<Array> = p
            .named_arrays()
            .iter()
            .map(|(_, a)| a.map(|v| 2.0 * v))
            .collect();
        opt.update(&mut p, &g).unwrap();
        assert!(p.layers[0].bias.data()[0] < 1.0);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = params();
        let mut g = grads_like(&p, 0.0);
        g[1].data_mut()[0] = f64::NAN;
        let mut opt = Adam::new(&p, LrSchedule::Constant(0.1));
        let e = opt.update(&mut p, &g).unwrap_err();
        assert!(e.to_string().contains("layer0.bias"), "{e}");
    }

    #[test]
    fn inverse_sqrt_schedule() {
        let s = LrSchedule::InverseSqrt {
            alpha_ref: 5e-4,
            t_ref: 8000.0,
        };
        assert_eq!(s.lr(1), 5e-4);
        assert_eq!(s.lr(8000), 5e-4);
        assert!((s.lr(32_000) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn ema_limits() {
        let p = params();
        let mut q = p.clone();
        q.layers[0]
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 1.0);
        let mut e = Ema::new(&p, 0.0);
        e.update(&q);
        assert_eq!(e.shadow, q);
        let mut e = Ema::new(&p, 1.0);
        e.update(&q);
        assert_eq!(e.shadow, p);
        let mut e = Ema::new(&p, 0.9);
        let dist = |e: &Ema| {
            e.shadow
                .flatten()
                .iter()
                .zip(q.flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let d0 = dist(&e);
        e.update(&q);
        let d1 = dist(&e);
        assert!((d1 / d0 - 0.9).abs() < 1e-12);
    }
}
