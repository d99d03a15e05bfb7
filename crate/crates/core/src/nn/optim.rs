use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Gradients, MlpModel};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::OutOfRange(format!("{name} = {b} not in [0, 1)")));
            }
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::OutOfRange("negative learning rate, weight decay or epsilon".into()));
        }
        Ok(())
    }
}

/// Which elements of a tensor the optimizer may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Gate {
    Frozen,
    Train,
    /// Trainable where `true`; masked-out elements keep their value and moments.
    Masked(Vec<bool>),
}

/// AdamW moments for every tensor of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub hyper: AdamWConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamWState {
    pub fn new(model: &MlpModel, hyper: AdamWConfig) -> Self {
        let shapes: Vec<usize> = (0..model.tensor_count()).map(|i| model.tensor(i).len()).collect();
        Self::with_shapes(&shapes, hyper)
    }

    pub fn with_shapes(lengths: &[usize], hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            first_moment: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, tensor: usize) -> &[f64] {
        &self.first_moment[tensor]
    }

    pub fn second_moment(&self, tensor: usize) -> &[f64] {
        &self.second_moment[tensor]
    }

    /// Applies one AdamW update to every tensor that has a gradient.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients, gates: &[Gate]) -> Result<()> {
        check_dim("optimizer tensors", self.first_moment.len(), model.tensor_count())?;
        check_dim("gradient tensors", model.tensor_count(), grads.len())?;
        if !gates.is_empty() {
            check_dim("gates", model.tensor_count(), gates.len())?;
        }
        self.step_count += 1;
        for i in 0..model.tensor_count() {
            let Some(grad) = grads.slot(i) else { continue };
            let mask = match gates.get(i) {
                Some(Gate::Frozen) => continue,
                Some(Gate::Masked(mask)) => Some(mask.as_slice()),
                Some(Gate::Train) | None => None,
            };
            adamw_step(
                model.tensor_mut(i),
                grad,
                &mut self.first_moment[i],
                &mut self.second_moment[i],
                self.step_count,
                &self.hyper,
                mask,
            )?;
        }
        Ok(())
    }

    /// Step over plain tensors (no model), all trainable.
    pub fn step_tensors(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        check_dim("optimizer tensors", self.first_moment.len(), params.len())?;
        check_dim("gradient tensors", params.len(), grads.len())?;
        self.step_count += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            adamw_step(
                p,
                g,
                &mut self.first_moment[i],
                &mut self.second_moment[i],
                self.step_count,
                &self.hyper,
                None,
            )?;
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam update of one tensor. `step` is the 1-based
/// step index used for bias correction.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    hyper: &AdamWConfig,
    mask: Option<&[bool]>,
) -> Result<()> {
    check_dim("adamw gradient", param.len(), grad.len())?;
    check_dim("adamw first moment", param.len(), m.len())?;
    check_dim("adamw second moment", param.len(), v.len())?;
    if let Some(mask) = mask {
        check_dim("adamw mask", param.len(), mask.len())?;
    }
    if step == 0 {
        return Err(Error::OutOfRange("adamw step index starts at 1".into()));
    }
    let AdamWConfig {
        learning_rate: lr,
        weight_decay: wd,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = *hyper;
    let c1 = 1.0 - b1.powi(step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(step.min(i32::MAX as u64) as i32);
    for i in 0..param.len() {
        if mask.is_some_and(|mask| !mask[i]) {
            continue;
        }
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * param[i]);
    }
    Ok(())
}

/// Cosine-annealed learning rate for `epoch` of `total_epochs`, reaching 0 at the end.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::OutOfRange(format!(
            "epoch {epoch} of {total_epochs}"
        )));
    }
    let phase = PI * epoch as f64 / total_epochs as f64;
    Ok((base_lr * (1.0 + phase.cos()) / 2.0).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::with_shapes(&[3], hyper);
        let mut p = vec![vec![1.5, -2.0, 0.25]];
        st.step_tensors(&mut p, &[vec![0.0; 3]]).unwrap();
        assert_eq!(p[0], vec![1.5, -2.0, 0.25]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut st = AdamWState::with_shapes(&[1], AdamWConfig::default());
        let mut p = vec![vec![1.0]];
        st.step_tensors(&mut p, &[vec![1.0]]).unwrap();
        let expected = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert!((p[0][0] - expected).abs() < 1e-15);
        assert!((p[0][0] - 0.99899).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let hyper = AdamWConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::with_shapes(&[2], hyper);
        let mut p = vec![vec![0.7, -0.3]];
        for _ in 0..5 {
            st.step_tensors(&mut p, &[vec![3.0, -1.0]]).unwrap();
        }
        assert_eq!(p[0], vec![0.7, -0.3]);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let hyper = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::with_shapes(&[1], hyper);
        let mut p = vec![vec![0.0]];
        for _ in 0..200 {
            let g = p[0][0] - 3.0;
            st.step_tensors(&mut p, &[vec![g]]).unwrap();
        }
        assert!((p[0][0] - 3.0).abs() < 1e-3, "theta = {}", p[0][0]);
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut st = AdamWState::with_shapes(&[2], AdamWConfig::default());
        let mut p = vec![vec![0.4, 0.4]];
        for k in 0..50 {
            let g = (k as f64).sin();
            st.step_tensors(&mut p, &[vec![g, g]]).unwrap();
            assert_eq!(p[0][0].to_bits(), p[0][1].to_bits());
        }
    }

    #[test]
    fn masked_elements_are_untouched() {
        let mut st = AdamWState::with_shapes(&[2], AdamWConfig::default());
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let mut p = vec![1.0, 1.0];
        adamw_step(&mut p, &[1.0, 1.0], &mut m, &mut v, 1, &st.hyper, Some(&[true, false])).unwrap();
        assert!(p[0] < 1.0);
        assert_eq!(p[1], 1.0);
        assert_eq!(v[1], 0.0);
        assert!(st.step_tensors(&mut [vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 0.001).unwrap(), 0.001);
        assert!(cosine_lr(10, 10, 0.001).unwrap().abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.001).unwrap() - 0.0005).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 0.001).is_err());
        assert!(cosine_lr(0, 0, 0.001).is_err());
    }

    #[test]
    fn rejects_bad_betas() {
        let bad = AdamWConfig {
            beta2: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(AdamWConfig::default().validate().is_ok());
    }
}
