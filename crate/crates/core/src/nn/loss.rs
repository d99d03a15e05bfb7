//! Cross-entropy and distillation losses, plus the routed forward/backward
//! pass shared by every objective.

use ndarray::{Array2, ArrayView2, Axis};

use super::{Batch, Gradients, HeadRouting, MlpModel, Objective, TrunkCache};
use crate::error::{check_dim, Error, Result};

pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

fn log_sum_exp(row: ndarray::ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Per-sample negative log-likelihood of `targets`.
pub fn per_sample_cross_entropy(logits: ArrayView2<'_, f64>, targets: &[usize]) -> Result<Vec<f64>> {
    check_dim("cross-entropy targets", logits.nrows(), targets.len())?;
    logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &y)| {
            if y >= row.len() {
                return Err(Error::OutOfRange(format!("target {y} for {} logits", row.len())));
            }
            Ok(log_sum_exp(row) - row[y])
        })
        .collect()
}

/// Gradient of `Σ_i w_i · CE_i` with respect to the logits.
pub fn cross_entropy_grad(
    logits: ArrayView2<'_, f64>,
    targets: &[usize],
    weights: &[f64],
) -> Result<Array2<f64>> {
    check_dim("cross-entropy targets", logits.nrows(), targets.len())?;
    check_dim("cross-entropy weights", logits.nrows(), weights.len())?;
    let mut d = softmax_rows(logits);
    for ((mut row, &y), &w) in d.rows_mut().into_iter().zip(targets).zip(weights) {
        row[y] -= 1.0;
        row.mapv_inplace(|v| v * w);
    }
    Ok(d)
}

/// Mean over rows of `T² · KL(softmax(old/T) ‖ softmax(new/T))` and its
/// gradient with respect to `new`.
pub fn distillation(
    new: ArrayView2<'_, f64>,
    old: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    check_dim("distillation rows", old.nrows(), new.nrows())?;
    check_dim("distillation columns", old.ncols(), new.ncols())?;
    if temperature <= 0.0 {
        return Err(Error::OutOfRange(format!("temperature {temperature}")));
    }
    let n = new.nrows() as f64;
    let scaled_new = new.mapv(|z| z / temperature);
    let scaled_old = old.mapv(|z| z / temperature);
    let p_new = softmax_rows(scaled_new.view());
    let p_old = softmax_rows(scaled_old.view());
    let mut loss = 0.0;
    for i in 0..new.nrows() {
        let lse_new = log_sum_exp(scaled_new.row(i));
        let lse_old = log_sum_exp(scaled_old.row(i));
        for k in 0..new.ncols() {
            let po = p_old[[i, k]];
            if po > 0.0 {
                let log_po = scaled_old[[i, k]] - lse_old;
                let log_pn = scaled_new[[i, k]] - lse_new;
                loss += po * (log_po - log_pn);
            }
        }
    }
    let t2 = temperature * temperature;
    let grad = (&p_new - &p_old) * (temperature / n);
    Ok((t2 * loss / n, grad))
}

struct HeadGroup {
    head: usize,
    rows: Vec<usize>,
    targets: Vec<usize>,
    logits: Array2<f64>,
}

/// Trunk pass over a batch with each row's logits taken from its routed head.
pub struct RoutedPass {
    cache: TrunkCache,
    groups: Vec<HeadGroup>,
    losses: Vec<f64>,
    rows: usize,
}

impl RoutedPass {
    pub fn forward(model: &MlpModel, batch: &Batch, routing: &HeadRouting) -> Result<Self> {
        let cache = model.trunk_forward(batch.inputs.view())?;
        let mut groups: Vec<HeadGroup> = Vec::new();
        for (row, (&task, &class)) in batch.task_ids.iter().zip(&batch.class_labels).enumerate() {
            let head = routing.head(task);
            let target = routing.target(task, class)?;
            match groups.iter_mut().find(|g| g.head == head) {
                Some(g) => {
                    g.rows.push(row);
                    g.targets.push(target);
                }
                None => groups.push(HeadGroup {
                    head,
                    rows: vec![row],
                    targets: vec![target],
                    logits: Array2::zeros((0, 0)),
                }),
            }
        }
        let mut losses = vec![0.0; batch.len()];
        for g in &mut groups {
            let feats = cache.features().select(Axis(0), &g.rows);
            g.logits = model.head_logits(g.head, feats.view())?;
            let l = per_sample_cross_entropy(g.logits.view(), &g.targets)?;
            for (&r, v) in g.rows.iter().zip(l) {
                losses[r] = v;
            }
        }
        Ok(Self {
            cache,
            groups,
            losses,
            rows: batch.len(),
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        self.cache.features()
    }

    pub fn cache(&self) -> &TrunkCache {
        &self.cache
    }

    /// Per-sample cross-entropy at the pass parameters.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn weighted_loss(&self, weights: &[f64]) -> f64 {
        self.losses.iter().zip(weights).map(|(l, w)| l * w).sum()
    }

    /// Backprops `Σ w_i CE_i` through the routed heads; returns the feature gradient.
    pub fn backward_heads(
        &self,
        model: &MlpModel,
        weights: &[f64],
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        check_dim("sample weights", self.rows, weights.len())?;
        let mut dfeat = Array2::zeros(self.features().raw_dim());
        for g in &self.groups {
            let w: Vec<f64> = g.rows.iter().map(|&r| weights[r]).collect();
            let dlogits = cross_entropy_grad(g.logits.view(), &g.targets, &w)?;
            let feats = self.features().select(Axis(0), &g.rows);
            let d = model.head_backward(g.head, feats.view(), dlogits.view(), grads)?;
            for (k, &r) in g.rows.iter().enumerate() {
                let mut dst = dfeat.row_mut(r);
                dst += &d.row(k);
            }
        }
        Ok(dfeat)
    }
}

/// Mean cross-entropy on each sample's routed head.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub routing: HeadRouting,
    /// When false, gradients stop at the features (frozen trunk).
    pub train_trunk: bool,
}

impl Objective for CrossEntropy {
    fn evaluate(&self, model: &MlpModel, batch: &Batch) -> Result<(f64, Gradients)> {
        let pass = RoutedPass::forward(model, batch, &self.routing)?;
        let weights = vec![1.0 / batch.len() as f64; batch.len()];
        let mut grads = Gradients::empty(model);
        let dfeat = pass.backward_heads(model, &weights, &mut grads)?;
        if self.train_trunk {
            model.trunk_backward(pass.cache(), dfeat, &mut grads);
        }
        Ok((pass.weighted_loss(&weights), grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_c() {
        let l = per_sample_cross_entropy(array![[0.0, 0.0, 0.0, 0.0]].view(), &[2]).unwrap();
        assert!((l[0] - 4f64.ln()).abs() < 1e-15);
        assert!(per_sample_cross_entropy(array![[0.0, 0.0]].view(), &[2]).is_err());
    }

    #[test]
    fn distillation_vanishes_on_identical_logits() {
        let z = array![[1.0, -0.5, 2.0], [0.0, 0.3, -1.0]];
        let (loss, grad) = distillation(z.view(), z.view(), 2.0).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn distillation_gradient_matches_finite_differences() {
        let old = array![[1.0, -0.5, 2.0], [0.2, 0.3, -1.0]];
        let new = array![[0.1, 0.4, -0.3], [1.5, -0.2, 0.0]];
        let (_, grad) = distillation(new.view(), old.view(), 2.0).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            for k in 0..3 {
                let mut plus = new.clone();
                plus[[i, k]] += h;
                let mut minus = new.clone();
                minus[[i, k]] -= h;
                let fd = (distillation(plus.view(), old.view(), 2.0).unwrap().0
                    - distillation(minus.view(), old.view(), 2.0).unwrap().0)
                    / (2.0 * h);
                assert!((fd - grad[[i, k]]).abs() < 1e-8, "{fd} vs {}", grad[[i, k]]);
            }
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax_rows(array![[1000.0, 1000.0]].view());
        assert_eq!(p, array![[0.5, 0.5]]);
    }
}
