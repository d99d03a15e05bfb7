//! Magnitude pruning with per-weight task ownership.
//!
//! Every trunk weight carries a mask value: 0 while free, `t` once task `t`
//! (1-based) has claimed it. Claimed weights are never modified again.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_dim, Error, Result};
use crate::nn::MlpModel;

/// Claims for `task` the `round(ratio · free)` free weights of largest
/// magnitude. Ties go to the lower index.
pub fn packnet_prune(weights: &[f64], mask: &[u32], task: u32, ratio: f64, layer: usize) -> Result<Vec<u32>> {
    check_dim("packnet mask", weights.len(), mask.len())?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::OutOfRange(format!("pruning ratio {ratio}")));
    }
    if let Some(&m) = mask.iter().find(|&&m| m >= task) {
        return Err(Error::InvalidSpec(format!("mask value {m} not below task {task}")));
    }
    let mut free: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 0).collect();
    if free.is_empty() {
        return Err(Error::NoFreeWeights { layer });
    }
    let keep = (ratio * free.len() as f64).round() as usize;
    free.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    let mut out = mask.to_vec();
    for &i in &free[..keep] {
        out[i] = task;
    }
    Ok(out)
}

fn weight_tensor(layer: usize) -> usize {
    2 * layer
}

pub(crate) fn empty_masks(model: &MlpModel) -> Vec<Vec<u32>> {
    model.trunk().iter().map(|l| vec![0; l.weight.len()]).collect()
}

/// Copy of `model` whose trunk keeps only weights owned by tasks `1..=upto`.
pub fn masked_model(model: &MlpModel, masks: &[Vec<u32>], upto: u32) -> Result<MlpModel> {
    check_dim("packnet layers", model.trunk().len(), masks.len())?;
    let mut out = model.clone();
    for (layer, mask) in masks.iter().enumerate() {
        let w = out.tensor_mut(weight_tensor(layer));
        check_dim("packnet mask", w.len(), mask.len())?;
        for (w, &m) in w.iter_mut().zip(mask) {
            if m == 0 || m > upto {
                *w = 0.0;
            }
        }
    }
    Ok(out)
}

pub(crate) fn zero_free(model: &mut MlpModel, masks: &[Vec<u32>]) {
    for (layer, mask) in masks.iter().enumerate() {
        for (w, &m) in model.tensor_mut(weight_tensor(layer)).iter_mut().zip(mask) {
            if m == 0 {
                *w = 0.0;
            }
        }
    }
}

/// Fresh He-scaled values for every free weight.
pub(crate) fn reinit_free<R: Rng + ?Sized>(model: &mut MlpModel, masks: &[Vec<u32>], rng: &mut R) {
    for (layer, mask) in masks.iter().enumerate() {
        let fan_in = model.trunk()[layer].input_dim().max(1);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        for (w, &m) in model.tensor_mut(weight_tensor(layer)).iter_mut().zip(mask) {
            if m == 0 {
                *w = normal.sample(rng);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_largest_magnitudes() {
        let m = packnet_prune(&[0.1, 0.9, 0.5, 0.2], &[0; 4], 1, 0.5, 0).unwrap();
        assert_eq!(m, vec![0, 1, 1, 0]);
    }

    #[test]
    fn only_free_weights_are_claimed() {
        let m = packnet_prune(&[5.0, -0.9, 0.5, 0.2, -3.0], &[1, 0, 0, 0, 0], 2, 0.5, 0).unwrap();
        assert_eq!(m, vec![1, 2, 0, 0, 2]);
        assert!(matches!(
            packnet_prune(&[1.0], &[1], 2, 0.5, 3),
            Err(Error::NoFreeWeights { layer: 3 })
        ));
        assert!(packnet_prune(&[1.0], &[2], 2, 0.5, 0).is_err());
    }

    #[test]
    fn claimed_fraction_is_ratio_up_to_rounding() {
        for n in [1usize, 7, 10, 33] {
            for r in [0.1, 0.35, 0.5, 0.8] {
                let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
                let m = packnet_prune(&w, &vec![0; n], 1, r, 0).unwrap();
                let kept = m.iter().filter(|&&v| v == 1).count() as f64;
                assert!((kept - r * n as f64).abs() <= 0.5 + 1e-12, "n {n} r {r} kept {kept}");
            }
        }
    }
}
