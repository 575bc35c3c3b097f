use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{GradMap, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.0, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction. With `beta1 = 0` the first moment is just the
/// current gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// is touched, so a rejected step leaves `params` and the moments intact.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("adam: no gradient for parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            g.check_finite(&format!("gradient of parameter `{name}`"))?;
        }
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * gv;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gv * gv;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::from_vec(vec![v]));
        p
    }

    fn grad(v: f64) -> GradMap {
        [("p".to_string(), Tensor::from_vec(vec![v]))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("p").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // beta1 = 0: m_hat = g = 1; v_hat = (1-b2) g^2 / (1-b2) = 1.
        let eps = 1e-8;
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.1, beta1: 0.0, beta2: 0.999, epsilon: eps });
        adam.step(&mut p, &grad(1.0)).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + eps));
        assert!((p.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = single(0.3);
            let mut adam = Adam::new(AdamConfig::default());
            for k in 0..10 {
                adam.step(&mut p, &grad((k as f64 * 0.37).sin())).unwrap();
            }
            p.get("p").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = single(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut p, &grad(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert_eq!(p.get("p").unwrap().data(), &[1.0]);
        assert_eq!(adam.steps(), 0);
    }
}
