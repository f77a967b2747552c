//! Parameter update rules: SGD with momentum and LARS.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Added to the LARS trust-ratio denominator.
pub const LARS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lars,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
}

impl OptimizerConfig {
    /// Pretraining defaults.
    pub fn lars() -> Self {
        Self {
            kind: OptimizerKind::Lars,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: 0.001,
        }
    }

    /// Downstream defaults.
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            trust_coefficient: 0.001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.trust_coefficient > 0.0 && self.trust_coefficient.is_finite()) {
            return Err(Error::Config(format!(
                "trust coefficient must be > 0, got {}",
                self.trust_coefficient
            )));
        }
        Ok(())
    }
}

/// Hyperparameters plus one zero-initialized velocity buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    velocity: IndexMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let velocity = params
            .iter()
            .map(|(n, p)| (n.to_string(), vec![0.0; p.value.len()]))
            .collect();
        Ok(Self { config, velocity })
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Applies the configured rule and zeroes the gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        match self.config.kind {
            OptimizerKind::Lars => lars_step(params, self),
            OptimizerKind::Sgd => sgd_step(params, self),
        }
    }

    fn velocity_for(&mut self, name: &str, len: usize) -> Result<&mut Vec<f64>> {
        let v = self
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no velocity for `{name}`")))?;
        if v.len() != len {
            return Err(Error::State(format!(
                "velocity for `{name}` has {} entries, parameter has {len}",
                v.len()
            )));
        }
        Ok(v)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `v <- mu v + scale (g + wd w); w <- w - v`.
fn momentum_update(w: &mut [f64], g: &[f64], v: &mut [f64], mu: f64, wd: f64, scale: f64) {
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = mu * *vi + scale * (gi + wd * *wi);
        *wi -= *vi;
    }
}

/// SGD with momentum: `v <- mu v + (g + wd w); w <- w - lr v`. Gradients are
/// zeroed afterwards.
pub fn sgd_step(params: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    let c = state.config.clone();
    for (name, p) in params.iter_mut() {
        let v = state.velocity_for(name, p.value.len())?;
        sgd_update(p.value.data_mut(), p.grad.data(), v, &c);
    }
    params.zero_grads();
    Ok(())
}

fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], c: &OptimizerConfig) {
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = c.momentum * *vi + (gi + c.weight_decay * *wi);
        *wi -= c.lr * *vi;
    }
}

/// Layer-wise trust ratio `eta |w| / (|g| + wd |w| + 1e-9)`.
pub fn lars_trust_ratio(w_norm: f64, g_norm: f64, weight_decay: f64, eta: f64) -> f64 {
    eta * w_norm / (g_norm + weight_decay * w_norm + LARS_EPS)
}

/// LARS: parameters flagged `lars_adapt` use
/// `v <- mu v + lambda lr (g + wd w); w <- w - v` with the trust ratio
/// `lambda`; the rest fall back to [`sgd_step`]'s rule. Gradients are zeroed
/// afterwards.
pub fn lars_step(params: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    let c = state.config.clone();
    for (name, p) in params.iter_mut() {
        let v = state.velocity_for(name, p.value.len())?;
        if p.lars_adapt {
            let ratio = lars_trust_ratio(
                norm(p.value.data()),
                norm(p.grad.data()),
                c.weight_decay,
                c.trust_coefficient,
            );
            momentum_update(p.value.data_mut(), p.grad.data(), v, c.momentum, c.weight_decay, ratio * c.lr);
        } else {
            sgd_update(p.value.data_mut(), p.grad.data(), v, &c);
        }
    }
    params.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(name: &str, w: &[f64], g: &[f64], lars: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::new(vec![w.len()], w.to_vec()).unwrap(), lars).unwrap();
        s.get_mut(name).unwrap().grad.data_mut().copy_from_slice(g);
        s
    }

    fn cfg(kind: OptimizerKind, lr: f64, momentum: f64, wd: f64) -> OptimizerConfig {
        OptimizerConfig { kind, lr, momentum, weight_decay: wd, trust_coefficient: 0.001 }
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = store("w", &[1.0], &[2.0], false);
        let mut st = OptimizerState::new(cfg(OptimizerKind::Sgd, 0.1, 0.0, 0.0), &s).unwrap();
        st.step(&mut s).unwrap();
        assert!((s.value("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.get("w").unwrap().grad.data(), &[0.0]);
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let mut s = store("w", &[0.7, -0.2], &[0.0, 0.0], false);
        let mut st = OptimizerState::new(cfg(OptimizerKind::Sgd, 0.1, 0.9, 0.0), &s).unwrap();
        st.step(&mut s).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[0.7, -0.2]);
    }

    #[test]
    fn two_momentum_steps() {
        let mut s = store("w", &[0.0], &[1.0], false);
        let mut st = OptimizerState::new(cfg(OptimizerKind::Sgd, 0.1, 0.9, 0.0), &s).unwrap();
        st.step(&mut s).unwrap();
        s.get_mut("w").unwrap().grad.data_mut()[0] = 1.0;
        st.step(&mut s).unwrap();
        assert!((s.value("w").unwrap().data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn lars_ratio_example() {
        let r = lars_trust_ratio(1.0, 2.0, 0.0, 0.001);
        assert!((r - 0.0005).abs() < 1e-12);
    }

    #[test]
    fn lars_zero_weights_unchanged() {
        let mut s = store("w", &[0.0, 0.0], &[0.3, -1.0], true);
        let mut st = OptimizerState::new(cfg(OptimizerKind::Lars, 0.1, 0.9, 0.0), &s).unwrap();
        st.step(&mut s).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn lars_applies_trust_ratio() {
        // |w| = 1, |g| = 2: lambda = 0.0005, one step moves w by lr * lambda * g
        let mut s = store("w", &[1.0, 0.0], &[0.0, 2.0], true);
        let mut st = OptimizerState::new(cfg(OptimizerKind::Lars, 0.1, 0.9, 0.0), &s).unwrap();
        st.step(&mut s).unwrap();
        let w = s.value("w").unwrap().data();
        let lambda = 0.001 / (2.0 + 1e-9);
        assert_eq!(w[0], 1.0);
        assert!((w[1] + 0.1 * lambda * 2.0).abs() < 1e-15);
    }

    #[test]
    fn lars_bias_falls_back_to_sgd() {
        let c = cfg(OptimizerKind::Lars, 0.1, 0.9, 1e-4);
        let mut a = store("b", &[0.5, -0.5], &[1.0, 2.0], false);
        let mut b = a.clone();
        let mut sa = OptimizerState::new(c.clone(), &a).unwrap();
        let mut sb = OptimizerState::new(OptimizerConfig { kind: OptimizerKind::Sgd, ..c }, &b).unwrap();
        lars_step(&mut a, &mut sa).unwrap();
        sgd_step(&mut b, &mut sb).unwrap();
        assert!(a.values_bit_identical(&b));
    }

    #[test]
    fn zero_lr_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Lars] {
            let mut s = store("w", &[0.3, 0.4], &[1.0, -1.0], true);
            let before = s.clone();
            let mut st = OptimizerState::new(cfg(kind, 0.0, 0.9, 0.1), &s).unwrap();
            st.step(&mut s).unwrap();
            assert!(s.values_bit_identical(&before));
        }
    }

    #[test]
    fn sgd_decreases_quadratic_norm() {
        let mut s = store("w", &[3.0, -4.0], &[0.0, 0.0], false);
        let mut st = OptimizerState::new(cfg(OptimizerKind::Sgd, 0.3, 0.0, 0.0), &s).unwrap();
        let mut last = 5.0;
        for _ in 0..10 {
            let w = s.value("w").unwrap().clone();
            s.get_mut("w").unwrap().grad.data_mut().copy_from_slice(w.data());
            st.step(&mut s).unwrap();
            let n = s.value("w").unwrap().norm();
            assert!(n < last);
            last = n;
        }
    }

    #[test]
    fn lars_ratio_scale_invariant() {
        for c in [0.01, 3.0, 250.0] {
            let a = lars_trust_ratio(1.7, 0.4, 0.0, 0.001);
            let b = lars_trust_ratio(1.7 * c, 0.4 * c, 0.0, 0.001);
            // equal up to the 1e-9 denominator guard
            assert!((a - b).abs() / a < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_state_error() {
        let s = store("w", &[1.0], &[0.0], false);
        let mut st = OptimizerState::new(OptimizerConfig::sgd(), &s).unwrap();
        let mut other = store("w", &[1.0, 2.0], &[0.0, 0.0], false);
        assert!(matches!(st.step(&mut other), Err(Error::State(_))));
        let mut missing = store("v", &[1.0], &[0.0], false);
        assert!(matches!(st.step(&mut missing), Err(Error::State(_))));
    }

    #[test]
    fn invalid_hyperparameters() {
        let s = ParamStore::new();
        let mut c = OptimizerConfig::sgd();
        c.momentum = 1.0;
        assert!(OptimizerState::new(c, &s).is_err());
        let mut c = OptimizerConfig::lars();
        c.lr = -0.1;
        assert!(OptimizerState::new(c, &s).is_err());
    }
}
