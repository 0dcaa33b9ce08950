use std::collections::HashMap;

use crate::param::Param;
use crate::real::Real;
use crate::tensor::Grads;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with bias correction. Moments are kept per parameter name in `f64`.
pub struct Adam {
    config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: HashMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Changes the base learning rate; moments are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to every non-frozen parameter that has a gradient.
    pub fn step<'a, T: Real>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param<T>>,
        grads: &Grads<T>,
    ) {
        let c = self.config;
        for param in params {
            if param.is_frozen() {
                continue;
            }
            let Some(g) = grads.get(param.tensor()) else {
                continue;
            };
            let st = self
                .state
                .entry(param.name().to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; g.len()],
                    v: vec![0.0; g.len()],
                    t: 0,
                });
            assert_eq!(st.m.len(), g.len(), "parameter {} changed size", param.name());
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t);
            let bc2 = 1.0 - c.beta2.powi(st.t);
            let lr = c.lr * param.lr_scale();
            let updated: Vec<T> = param
                .data()
                .iter()
                .zip(g)
                .enumerate()
                .map(|(i, (&w, &gi))| {
                    let gi = gi.as_f64();
                    st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                    st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                    let mhat = st.m[i] / bc1;
                    let vhat = st.v[i] / bc2;
                    T::of(w.as_f64() - lr * mhat / (vhat.sqrt() + c.eps))
                })
                .collect();
            param.set_data(updated);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::<f64>::new("x", vec![3.0, -2.0], &[2]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let loss = p.tensor().sqr().sum_all();
            let g = loss.backward();
            opt.step([&mut p], &g);
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2), "{:?}", p.data());
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = Param::<f64>::new("x", vec![1.0], &[1]);
        p.freeze();
        let loss = p.tensor().sqr().sum_all();
        let g = loss.backward();
        assert!(g.get(p.tensor()).is_none());
        let mut opt = Adam::new(AdamConfig::default());
        opt.step([&mut p], &g);
        assert_eq!(p.data(), &[1.0]);
    }
}
