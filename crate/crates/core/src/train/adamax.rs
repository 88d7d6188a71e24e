//! Adamax: Adam with an infinity-norm second moment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamaxConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        AdamaxConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first moment `m` and infinity-norm accumulator `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState<T> {
    pub config: AdamaxConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub u: Vec<Vec<T>>,
}

impl<T: Real> AdamaxState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamaxConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.values.len()]).collect();
        AdamaxState {
            config,
            t: 0,
            m: zeros(),
            u: zeros(),
        }
    }

    /// One update:
    ///
    /// ```text
    /// t += 1
    /// m = b1 * m + (1 - b1) * g
    /// u = max(b2 * u, |g|)
    /// theta -= lr / (1 - b1^t) * m / (u + eps)
    /// ```
    ///
    /// `grads[i]` is `None` for parameters the pass did not reach; they are
    /// left untouched. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Numeric(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            let p = params.get(id);
            if let Some(g) = g {
                if g.len() != p.values.len() {
                    return Err(Error::Numeric(format!(
                        "gradient of {} has {} values, expected {}",
                        p.name,
                        g.len(),
                        p.values.len()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
                }
            }
        }
        self.t += 1;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.eps);
        let step = T::from_f64_lossy(lr / (1.0 - c.beta1.powi(self.t as i32)));
        let one = T::one();
        for ((p, g), (m, u)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.u.iter_mut()))
        {
            let Some(g) = g else { continue };
            for (((theta, &g), m), u) in p.values.iter_mut().zip(g).zip(m.iter_mut()).zip(u.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *u = (b2 * *u).max(g.abs());
                *theta -= step * *m / (*u + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", vec![1], vec![v]);
        s
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = store(0.7);
        let mut opt = AdamaxState::new(&p, AdamaxConfig::default());
        opt.step(&mut p, &[Some(vec![0.0])], 1e-3).unwrap();
        assert_eq!(p.get(p.ids().next().unwrap()).values, vec![0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut opt = AdamaxState::new(&p, AdamaxConfig::default());
        opt.step(&mut p, &[Some(vec![1.0])], 1e-3).unwrap();
        let theta = p.iter().next().unwrap().values[0];
        let want = 1.0 - 1e-3 * (0.1 / (1.0 - 0.9)) / (1.0 + 1e-8);
        assert!((theta - want).abs() < 1e-15);
        assert!((1.0 - theta - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn matches_scalar_reference_on_random_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut p = store(0.3);
            let mut opt = AdamaxState::new(&p, AdamaxConfig::default());
            let (mut theta, mut m, mut u) = (0.3f64, 0.0f64, 0.0f64);
            for t in 1..=100 {
                let g: f64 = rng.gen_range(-2.0..2.0);
                let lr: f64 = rng.gen_range(1e-4..1e-2);
                opt.step(&mut p, &[Some(vec![g])], lr).unwrap();
                m = 0.9 * m + 0.1 * g;
                u = (0.999 * u).max(g.abs());
                theta -= lr / (1.0 - 0.9f64.powi(t)) * m / (u + 1e-8);
                let got = p.iter().next().unwrap().values[0];
                assert!((got - theta).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(1.0);
        let mut opt = AdamaxState::new(&p, AdamaxConfig::default());
        let err = opt.step(&mut p, &[Some(vec![f64::NAN])], 1e-3).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn unreached_parameters_are_skipped() {
        let mut p = store(2.0);
        let mut opt = AdamaxState::new(&p, AdamaxConfig::default());
        opt.step(&mut p, &[None], 1e-3).unwrap();
        assert_eq!(p.iter().next().unwrap().values, vec![2.0]);
    }
}
