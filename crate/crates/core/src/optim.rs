//! RMSProp and critic weight clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub alpha: f32,
    pub rho: f32,
    pub floor: f32,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            rho: 0.99,
            floor: 1e-8,
        }
    }
}

/// Running averages of squared gradients, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    pub state: Vec<Vec<f32>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &ParamStore) -> Self {
        let state = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { config, state }
    }

    /// `v = rho v + (1 - rho) g^2; p -= alpha g / (sqrt(v) + floor)`.
    ///
    /// Every gradient is checked before any parameter moves, so a
    /// non-finite gradient leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != params.len() || self.state.len() != params.len() {
            return Err(Error::shape("rmsprop", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("rmsprop", format!("gradient of `{name}` has shape {:?}", g.shape())));
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: name.to_string(),
                    index,
                });
            }
        }
        let RmsPropConfig { alpha, rho, floor } = self.config;
        for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut self.state) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = rho * *vi + (1.0 - rho) * gi * gi;
                *pi -= alpha * gi / (vi.sqrt() + floor);
            }
        }
        Ok(())
    }
}

/// Clamps every parameter into `[-c, c]`.
pub fn clip_weights(params: &mut ParamStore, c: f32) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn hand_evaluated_step() {
        let mut s = scalar_store(0.0);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &s);
        opt.step(&mut s, &[Tensor::from_vec(&[1], vec![1.0]).unwrap()]).unwrap();
        assert!((opt.state[0][0] - 0.01).abs() < 1e-8);
        let expected = -1e-4 / (0.1 + 1e-8);
        assert!((s.get(s.id("p").unwrap()).data()[0] as f64 - expected).abs() < 1e-9 * 1e3);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = scalar_store(0.75);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &s);
        for _ in 0..5 {
            opt.step(&mut s, &[Tensor::zeros(&[1])]).unwrap();
        }
        assert_eq!(s.by_name("p").unwrap().data()[0], 0.75);
    }

    #[test]
    fn repeated_gradients_settle_just_below_alpha() {
        let mut s = scalar_store(0.0);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &s);
        let g = 0.5f32;
        let mut prev = f32::INFINITY;
        for _ in 0..3000 {
            s.set("p", Tensor::zeros(&[1])).unwrap();
            opt.step(&mut s, &[Tensor::from_vec(&[1], vec![g]).unwrap()]).unwrap();
            let step = -s.by_name("p").unwrap().data()[0];
            assert!(step <= prev * (1.0 + 1e-6));
            prev = step;
        }
        let limit = 1e-4 * g as f64 / (g as f64 + 1e-8);
        assert!(limit < 1e-4);
        assert!((prev as f64 - limit).abs() < 1e-4 * 1e-3);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &s);
        let err = opt.step(&mut s, &[Tensor::from_vec(&[1], vec![f32::NAN]).unwrap()]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name, index: 0 } if name == "p"));
        assert_eq!(s.by_name("p").unwrap().data()[0], 1.0);
    }

    #[test]
    fn clip_cases() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(&[3], vec![0.5, -0.005, -2.0]).unwrap()).unwrap();
        clip_weights(&mut s, 0.01);
        assert_eq!(s.by_name("w").unwrap().data(), &[0.01, -0.005, -0.01]);
    }
}
