//! Parameter update rules: SGD with momentum and Adam.
//!
//! SGDM keeps the learning rate inside the velocity (`v ← μv − lr·g; θ ← θ + v`).
//! The other common form, `v ← μv + g; θ ← θ − lr·v`, differs only when the
//! learning rate changes between steps, which never happens here.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{Gradients, Parameters};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgdm,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgdm,
            learning_rate: 0.00005,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgdm(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgdm,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Step counter plus per-parameter moment buffers. `first_moment` holds the
/// SGDM velocity or the Adam mean; `second_moment` is only used by Adam.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

fn check_shapes(params: &Parameters, grads: &Gradients) -> Result<()> {
    for (name, p) in params.iter() {
        if params.is_frozen(name) {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| Error::Shape {
            layer: name.clone(),
            detail: "no gradient for parameter".into(),
        })?;
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                layer: name.clone(),
                detail: format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape()),
            });
        }
    }
    Ok(())
}

fn moment<'a>(buf: &'a mut BTreeMap<String, Tensor>, name: &str, like: &Tensor) -> Result<&'a mut Tensor> {
    let t = buf
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(like.shape()));
    if t.shape() != like.shape() {
        return Err(Error::Shape {
            layer: name.to_string(),
            detail: format!("optimizer state shape {:?} vs parameter {:?}", t.shape(), like.shape()),
        });
    }
    Ok(t)
}

/// In-place SGDM update of every non-frozen parameter.
pub fn sgdm_update(
    params: &mut Parameters,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_shapes(params, grads)?;
    let frozen = params.frozen.clone();
    for (name, p) in params.iter_mut() {
        if frozen.contains(name) {
            continue;
        }
        let g = grads.get(name).expect("checked");
        let v = moment(&mut state.first_moment, name, p)?;
        for ((theta, vel), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vel = cfg.momentum * *vel - cfg.learning_rate * gi;
            *theta += *vel;
        }
    }
    state.step_count += 1;
    Ok(())
}

/// In-place bias-corrected Adam update of every non-frozen parameter.
pub fn adam_update(
    params: &mut Parameters,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_shapes(params, grads)?;
    let t = state.step_count + 1;
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let frozen = params.frozen.clone();
    for (name, p) in params.iter_mut() {
        if frozen.contains(name) {
            continue;
        }
        let g = grads.get(name).expect("checked");
        let m = moment(&mut state.first_moment, name, p)?;
        let v = moment(&mut state.second_moment, name, p)?;
        for (((theta, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    state.step_count = t;
    Ok(())
}

/// Functional SGDM step.
pub fn sgdm_step(
    params: &Parameters,
    grads: &Gradients,
    state: &OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<(Parameters, OptimizerState)> {
    if cfg.kind != OptimizerKind::Sgdm {
        return Err(Error::Config("sgdm_step called with a non-SGDM config".into()));
    }
    let (mut p, mut s) = (params.clone(), state.clone());
    sgdm_update(&mut p, grads, &mut s, cfg)?;
    Ok((p, s))
}

/// Functional Adam step.
pub fn adam_step(
    params: &Parameters,
    grads: &Gradients,
    state: &OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<(Parameters, OptimizerState)> {
    if cfg.kind != OptimizerKind::Adam {
        return Err(Error::Config("adam_step called with a non-Adam config".into()));
    }
    let (mut p, mut s) = (params.clone(), state.clone());
    adam_update(&mut p, grads, &mut s, cfg)?;
    Ok((p, s))
}

/// Owns a config and its state for a training loop.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: OptimizerState::default(),
        })
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients) -> Result<()> {
        match self.cfg.kind {
            OptimizerKind::Sgdm => sgdm_update(params, grads, &mut self.state, &self.cfg),
            OptimizerKind::Adam => adam_update(params, grads, &mut self.state, &self.cfg),
        }
    }

    pub fn steps(&self) -> u64 {
        self.state.step_count
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Parameters {
        Parameters::new([("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())].into(), 0)
    }

    fn grad(v: f64) -> Gradients {
        Gradients {
            tensors: [("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())].into(),
        }
    }

    fn value(p: &Parameters) -> f64 {
        p.get("w").unwrap().data()[0]
    }

    #[test]
    fn sgdm_hand_arithmetic() {
        let cfg = OptimizerConfig {
            momentum: 0.9,
            ..OptimizerConfig::sgdm(0.1)
        };
        let (p, s) = sgdm_step(&scalar(1.0), &grad(2.0), &OptimizerState::default(), &cfg).unwrap();
        assert!((s.first_moment["w"].data()[0] + 0.2).abs() < 1e-15);
        assert!((value(&p) - 0.8).abs() < 1e-15);
        let (p, s) = sgdm_step(&p, &grad(2.0), &s, &cfg).unwrap();
        assert!((s.first_moment["w"].data()[0] + 0.38).abs() < 1e-15);
        assert!((value(&p) - 0.42).abs() < 1e-15);
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let p0 = scalar(1.5);
        let (p, _) = sgdm_step(&p0, &grad(0.0), &OptimizerState::default(), &OptimizerConfig::sgdm(0.1)).unwrap();
        assert_eq!(p, p0);
        let (p, _) = adam_step(&p0, &grad(0.0), &OptimizerState::default(), &OptimizerConfig::adam(0.1)).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn adam_first_step() {
        let cfg = OptimizerConfig::adam(0.001);
        let (p, s) = adam_step(&scalar(0.0), &grad(3.0), &OptimizerState::default(), &cfg).unwrap();
        let expected = -0.001 * 3.0 / (3.0 + 1e-8);
        assert_eq!(value(&p), expected);
        assert!((value(&p) + 0.000_999_999_996_667).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let bad = Gradients {
            tensors: [("w".to_string(), Tensor::zeros(&[2]))].into(),
        };
        assert!(sgdm_step(&scalar(1.0), &bad, &OptimizerState::default(), &OptimizerConfig::sgdm(0.1)).is_err());
        let missing = Gradients {
            tensors: BTreeMap::new(),
        };
        assert!(adam_step(&scalar(1.0), &missing, &OptimizerState::default(), &OptimizerConfig::adam(0.1)).is_err());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        assert!(sgdm_step(&scalar(1.0), &grad(1.0), &OptimizerState::default(), &OptimizerConfig::adam(0.1)).is_err());
        assert!(adam_step(&scalar(1.0), &grad(1.0), &OptimizerState::default(), &OptimizerConfig::sgdm(0.1)).is_err());
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = scalar(1.0);
        p.frozen.insert("w".into());
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        opt.step(&mut p, &grad(5.0)).unwrap();
        assert_eq!(value(&p), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig::sgdm(0.0).validate().is_err());
        let c = OptimizerConfig {
            beta2: 1.0,
            ..OptimizerConfig::adam(0.1)
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn descent_on_quadratic() {
        // f(w) = sum_i a_i w_i^2 / 2 with a = (1, 4). The SGDM rate keeps the
        // momentum recurrence overdamped (lr·a ≤ (1 − √μ)²).
        for cfg in [OptimizerConfig::sgdm(0.0005), OptimizerConfig::adam(0.0001)] {
            let mut p = Parameters::new(
                [("w".to_string(), Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())].into(),
                0,
            );
            let a = [1.0, 4.0];
            let loss = |p: &Parameters| {
                p.get("w").unwrap().data().iter().zip(a).map(|(w, a)| 0.5 * a * w * w).sum::<f64>()
            };
            let mut opt = Optimizer::new(cfg).unwrap();
            let mut prev = loss(&p);
            for _ in 0..1000 {
                let g: Vec<f64> = p.get("w").unwrap().data().iter().zip(a).map(|(w, a)| a * w).collect();
                let g = Gradients {
                    tensors: [("w".to_string(), Tensor::new(vec![2], g).unwrap())].into(),
                };
                opt.step(&mut p, &g).unwrap();
                let l = loss(&p);
                assert!(l <= prev + 1e-15, "loss rose from {prev} to {l}");
                prev = l;
            }
        }
    }
}
