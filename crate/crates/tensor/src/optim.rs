use std::collections::BTreeMap;

use crate::param::Module;
use crate::scalar::Scalar;
use crate::tensor::Grads;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state survives a save/load cycle of the owning module.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f32> {
    pub settings: AdamSettings,
    pub steps: u64,
    pub moments: BTreeMap<String, AdamMoments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(settings: AdamSettings) -> Self {
        Adam {
            settings,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter of `module` that has a gradient.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Grads<T>) {
        self.steps += 1;
        let s = self.settings;
        let t = self.steps as i32;
        let b1 = T::from_f64_lossy(s.beta1);
        let b2 = T::from_f64_lossy(s.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - s.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - s.beta2.powi(t));
        let lr = T::from_f64_lossy(s.lr);
        let eps = T::from_f64_lossy(s.eps);
        for p in module.params_mut() {
            let Some(g) = grads.get_id(p.id()) else {
                continue;
            };
            let n = p.len();
            let mom = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| AdamMoments {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                });
            let data = p.data_mut();
            for i in 0..n {
                let gi = g[i];
                mom.m[i] = b1 * mom.m[i] + (one - b1) * gi;
                mom.v[i] = b2 * mom.v[i] + (one - b2) * gi * gi;
                let mh = mom.m[i] / c1;
                let vh = mom.v[i] / c2;
                data[i] = data[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Param, Tensor};

    struct Quad {
        w: Param<f64>,
    }

    impl Module<f64> for Quad {
        fn params(&self) -> Vec<&Param<f64>> {
            vec![&self.w]
        }
        fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
            vec![&mut self.w]
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut q = Quad {
            w: Param::new("w", &[2], vec![1.0, -1.0]).unwrap(),
        };
        let mut adam = Adam::new(AdamSettings::default());
        let loss = q.w.bind(true).sqr().sum_all();
        let g = loss.backward().unwrap();
        adam.step(&mut q, &g);
        assert!((q.w.data()[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((q.w.data()[1] - (-1.0 + 2e-4)).abs() < 1e-9);
        assert_eq!(adam.steps, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut q = Quad {
            w: Param::new("w", &[1], vec![3.0]).unwrap(),
        };
        let mut adam = Adam::new(AdamSettings {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            let target = Tensor::from_vec(vec![0.5], &[1]).unwrap();
            let loss = q.w.bind(true).sub(&target).unwrap().sqr().sum_all();
            let g = loss.backward().unwrap();
            adam.step(&mut q, &g);
        }
        assert!((q.w.data()[0] - 0.5).abs() < 1e-3);
    }
}
