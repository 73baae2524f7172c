use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::tensor::{GradMap, ParamStore, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_EPS: f64 = 1e-10;

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradMap, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adagrad,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adagrad => "adagrad",
        })
    }
}

/// Per-parameter optimizer slots. Adam keeps first and second moments;
/// AdaGrad keeps only the squared-gradient accumulator (in `second`).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    /// Zeroed slots for every trainable parameter.
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros = || -> BTreeMap<String, Tensor> {
            params
                .trainable()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        Self {
            kind,
            step: 0,
            first: if kind == OptimizerKind::Adam { zeros() } else { BTreeMap::new() },
            second: zeros(),
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Adam => adam_step(params, grads, self, lr),
            OptimizerKind::Adagrad => adagrad_step(params, grads, self, lr),
        }
    }

    /// Slot tensors under their checkpoint names.
    pub fn slots(&self) -> Vec<(String, &Tensor)> {
        let (a, b) = match self.kind {
            OptimizerKind::Adam => ("adam.m/", "adam.v/"),
            OptimizerKind::Adagrad => ("", "adagrad.acc/"),
        };
        let firsts = self.first.iter().map(|(k, t)| (format!("{a}{k}"), t));
        let seconds = self.second.iter().map(|(k, t)| (format!("{b}{k}"), t));
        firsts.chain(seconds).collect()
    }
}

/// Pairs each trainable parameter with its gradient and slot(s), failing if
/// the three name sets differ.
fn check_names(params: &ParamStore, grads: &GradMap, slots: &BTreeMap<String, Tensor>) -> Result<()> {
    let trainable: Vec<&String> = params.trainable().map(|(k, _)| k).collect();
    let g: Vec<&String> = grads.keys().collect();
    let s: Vec<&String> = slots.keys().collect();
    if trainable != g || trainable != s {
        return Err(TrainError::Structure(format!(
            "optimizer sees {} trainable parameters, {} gradients and {} slots",
            trainable.len(),
            g.len(),
            s.len()
        )));
    }
    Ok(())
}

/// Adam with bias correction (β₁ 0.9, β₂ 0.999, ε 1e-8).
pub fn adam_step(params: &mut ParamStore, grads: &GradMap, state: &mut OptimizerState, lr: f64) -> Result<()> {
    check_names(params, grads, &state.second)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?.data_mut();
        let m = state.first.get_mut(name).expect("checked").data_mut();
        let v = state.second.get_mut(name).expect("checked").data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// AdaGrad: `acc += g²; θ -= lr·g / (√acc + ε)`.
pub fn adagrad_step(params: &mut ParamStore, grads: &GradMap, state: &mut OptimizerState, lr: f64) -> Result<()> {
    check_names(params, grads, &state.second)?;
    state.step += 1;
    for (name, g) in grads {
        let p = params.get_mut(name)?.data_mut();
        let acc = state.second.get_mut(name).expect("checked").data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            acc[i] += gi * gi;
            p[i] -= lr * gi / (acc[i].sqrt() + ADAGRAD_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        [("x".to_string(), Tensor::vector(vec![x]).with_requires_grad(true))]
            .into_iter()
            .collect()
    }

    fn grad(v: f64) -> GradMap {
        [("x".to_string(), Tensor::vector(vec![v]))].into_iter().collect()
    }

    fn x(p: &ParamStore) -> f64 {
        p.get("x").unwrap().data()[0]
    }

    #[test]
    fn clipping() {
        let mut g = grad(3.0);
        assert_eq!(clip_gradients(&mut g, 5.0), 3.0);
        assert_eq!(g["x"].data(), &[3.0]);
        let mut g = grad(10.0);
        clip_gradients(&mut g, 5.0);
        assert_eq!(g["x"].data(), &[5.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g0 in [0.003, -7.0, 120.0] {
            let mut p = scalar_store(1.0);
            let mut s = OptimizerState::new(OptimizerKind::Adam, &p);
            adam_step(&mut p, &grad(g0), &mut s, 0.01).unwrap();
            let delta = x(&p) - 1.0;
            assert!((delta + 0.01 * g0.signum()).abs() < 0.01 * 1e-3);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = scalar_store(2.0);
        let mut s = OptimizerState::new(OptimizerKind::Adam, &p);
        adam_step(&mut p, &grad(1.0), &mut s, 0.1).unwrap();
        let (m, before) = (s.first["x"].data()[0], x(&p));
        // Adam keeps moving on momentum; check moments decay and AdaGrad stays put.
        adam_step(&mut p, &grad(0.0), &mut s, 0.1).unwrap();
        assert!((s.first["x"].data()[0] - ADAM_BETA1 * m).abs() < 1e-18);
        assert!(x(&p) < before);

        let mut p = scalar_store(2.0);
        let mut s = OptimizerState::new(OptimizerKind::Adagrad, &p);
        adagrad_step(&mut p, &grad(0.0), &mut s, 0.3).unwrap();
        assert_eq!(x(&p), 2.0);
    }

    #[test]
    fn adagrad_first_step_and_constant_gradient() {
        let mut p = scalar_store(0.0);
        let mut s = OptimizerState::new(OptimizerKind::Adagrad, &p);
        let mut prev = 0.0;
        for k in 1..=9 {
            adagrad_step(&mut p, &grad(-2.5), &mut s, 0.3).unwrap();
            let delta = x(&p) - prev;
            prev = x(&p);
            assert!((delta - 0.3 / (k as f64).sqrt()).abs() < 1e-9, "step {k}");
        }
    }

    #[test]
    fn mismatched_gradients_are_structural_errors() {
        let mut p = scalar_store(0.0);
        let mut s = OptimizerState::new(OptimizerKind::Adam, &p);
        let g: GradMap = [("y".to_string(), Tensor::vector(vec![1.0]))].into_iter().collect();
        assert!(matches!(adam_step(&mut p, &g, &mut s, 0.1), Err(TrainError::Structure(_))));
    }
}
