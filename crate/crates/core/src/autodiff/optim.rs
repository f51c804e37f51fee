use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Gradients, ParamSet, Tensor};

/// Learning-rate schedule over a fixed iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Geometric decay from the base rate to `final_lr` over `iterations`.
    Exponential {
        final_lr: f64,
        iterations: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmspropConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        RmspropConfig {
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }
}

impl RmspropConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Exponential {
                final_lr,
                iterations,
            } => {
                let frac = (iteration as f64 / iterations.max(1) as f64).min(1.0);
                self.lr * (final_lr / self.lr).powf(frac)
            }
        }
    }
}

/// RMSprop state: one running mean of squared gradients per parameter.
#[derive(Debug, Clone)]
pub struct Rmsprop {
    pub config: RmspropConfig,
    mean_sq: Vec<Option<Tensor>>,
    pub iteration: usize,
}

impl Rmsprop {
    pub fn new(config: RmspropConfig) -> Self {
        Rmsprop {
            config,
            mean_sq: Vec::new(),
            iteration: 0,
        }
    }

    /// `s <- rho s + (1 - rho) g^2; p <- p - lr g / (sqrt(s) + eps)` for every
    /// trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        let lr = self.config.lr_at(self.iteration);
        let RmspropConfig { rho, eps, .. } = self.config;
        if self.mean_sq.len() < params.len() {
            self.mean_sq.resize(params.len(), None);
        }
        for i in 0..params.len() {
            let p = params.get_mut(i);
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(i) else { continue };
            let s = self.mean_sq[i].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            Zip::from(&mut p.value).and(s).and(g).for_each(|p, s, &g| {
                *s = rho * *s + (1.0 - rho) * g * g;
                *p -= lr * g / (s.sqrt() + eps);
            });
        }
        self.iteration += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use ndarray::arr1;

    fn quad_grads(ps: &ParamSet) -> Gradients {
        let tape = Tape::new();
        let mut loss = None;
        for i in 0..ps.len() {
            let x = tape.param(ps, i);
            let term = x.mul(&x).sum();
            loss = Some(match loss {
                None => term,
                Some(l) => term.add(&l),
            });
        }
        tape.backward(loss.unwrap(), ps.len()).unwrap().0
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params() {
        let mut ps = ParamSet::new();
        ps.add("a", arr1(&[0.0, 0.0]).into_dyn(), true);
        let before = ps.clone();
        let mut opt = Rmsprop::new(RmspropConfig::default());
        let g = quad_grads(&ps);
        opt.step(&mut ps, &g);
        assert_eq!(ps, before);

        let mut ps = ParamSet::new();
        ps.add("a", arr1(&[1.0, -3.0]).into_dyn(), true);
        let before = ps.clone();
        let mut opt = Rmsprop::new(RmspropConfig {
            lr: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            let g = quad_grads(&ps);
            opt.step(&mut ps, &g);
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut ps = ParamSet::new();
        ps.add("a", arr1(&[1.0]).into_dyn(), true);
        ps.add("b", arr1(&[2.0]).into_dyn(), false);
        let mut opt = Rmsprop::new(RmspropConfig::default());
        for _ in 0..10 {
            let g = quad_grads(&ps);
            opt.step(&mut ps, &g);
        }
        assert_eq!(ps.get(1).value[[0]], 2.0);
        assert!(ps.get(0).value[[0]] < 1.0);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        // With g fixed, s -> g^2 and the step tends to lr * sign(g).
        let mut ps = ParamSet::new();
        ps.add("a", arr1(&[0.0, 0.0]).into_dyn(), true);
        let g = Gradients {
            grads: vec![Some(arr1(&[0.3, -2.0]).into_dyn())],
        };
        let cfg = RmspropConfig::default();
        let mut opt = Rmsprop::new(cfg);
        let mut last = ps.get(0).value.clone();
        for _ in 0..400 {
            opt.step(&mut ps, &g);
            let now = ps.get(0).value.clone();
            let step = &now - &last;
            last = now;
            if opt.iteration == 400 {
                assert!((step[0] + cfg.lr).abs() < 1e-9);
                assert!((step[1] - cfg.lr).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exponential_schedule_endpoints() {
        let cfg = RmspropConfig {
            lr: 1e-2,
            schedule: LrSchedule::Exponential {
                final_lr: 1e-4,
                iterations: 100,
            },
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-2);
        assert!((cfg.lr_at(50) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(100) - 1e-4).abs() < 1e-17);
        assert!((cfg.lr_at(500) - 1e-4).abs() < 1e-17);
    }
}
