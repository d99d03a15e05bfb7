//! Training objectives: cross-entropy with optional per-sample weights,
//! online-EWC penalty and LwF distillation, plus the Group DRO and Fisher
//! helpers that feed them.

use ndarray::{s, Array2};

use crate::error::{check_dim, Error, Result};
use crate::nn::loss::{distillation, CrossEntropy, RoutedPass};
use crate::nn::{Batch, Gradients, HeadRouting, MlpModel, Objective};
use crate::stream::{to_batch, BiasedSample};

/// `(λ/2) Σ_i F_i (θ_i − θ*_i)²` over every anchored tensor.
pub fn ewc_penalty(
    params: &[Vec<f64>],
    anchors: &[Vec<f64>],
    fisher: &[Vec<f64>],
    lambda: f64,
) -> Result<f64> {
    check_dim("ewc anchors", anchors.len(), fisher.len())?;
    if params.len() < anchors.len() {
        return Err(Error::DimensionMismatch {
            context: "ewc parameters",
            expected: anchors.len(),
            found: params.len(),
        });
    }
    let mut total = 0.0;
    for ((p, a), f) in params.iter().zip(anchors).zip(fisher) {
        check_dim("ewc fisher tensor", a.len(), f.len())?;
        if p.len() < a.len() {
            return Err(Error::DimensionMismatch {
                context: "ewc parameter tensor",
                expected: a.len(),
                found: p.len(),
            });
        }
        total += p.iter().zip(a).zip(f).map(|((p, a), f)| f * (p - a) * (p - a)).sum::<f64>();
    }
    Ok(0.5 * lambda * total)
}

/// Online consolidation: running mean of per-task Fisher diagonals.
///
/// Tensors that grew since the last consolidation (new heads, widened
/// output rows) are zero-padded on the old side.
pub fn ewc_consolidate(
    fisher_old: &[Vec<f64>],
    fisher_task: &[Vec<f64>],
    tasks_seen: usize,
) -> Result<Vec<Vec<f64>>> {
    if fisher_task.len() < fisher_old.len() {
        return Err(Error::DimensionMismatch {
            context: "fisher tensors",
            expected: fisher_old.len(),
            found: fisher_task.len(),
        });
    }
    let n = tasks_seen as f64;
    let mut out = Vec::with_capacity(fisher_task.len());
    for (i, task) in fisher_task.iter().enumerate() {
        let old = fisher_old.get(i).map_or(&[][..], Vec::as_slice);
        if old.len() > task.len() {
            return Err(Error::DimensionMismatch {
                context: "fisher tensor",
                expected: old.len(),
                found: task.len(),
            });
        }
        let merged: Vec<f64> = task
            .iter()
            .enumerate()
            .map(|(k, &f)| (n * old.get(k).copied().unwrap_or(0.0) + f) / (n + 1.0))
            .collect();
        if let Some(bad) = merged.iter().chain(old).find(|f| **f < 0.0 || !f.is_finite()) {
            return Err(Error::OutOfRange(format!("fisher entry {bad}")));
        }
        out.push(merged);
    }
    Ok(out)
}

/// Diagonal empirical Fisher: mean over samples of the squared gradient of
/// each sample's cross-entropy on its routed head.
pub fn empirical_fisher(
    model: &MlpModel,
    samples: &[BiasedSample],
    routing: &HeadRouting,
) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::Empty("fisher dataset".into()));
    }
    let ce = CrossEntropy {
        routing: routing.clone(),
        train_trunk: true,
    };
    let mut fisher: Vec<Vec<f64>> = (0..model.tensor_count())
        .map(|i| vec![0.0; model.tensor(i).len()])
        .collect();
    for s in samples {
        let (_, grads) = ce.evaluate(model, &to_batch(&[s])?)?;
        for (i, f) in fisher.iter_mut().enumerate() {
            if let Some(g) = grads.slot(i) {
                f.iter_mut().zip(g).for_each(|(f, g)| *f += g * g);
            }
        }
    }
    let n = samples.len() as f64;
    fisher.iter_mut().flatten().for_each(|f| *f /= n);
    Ok(fisher)
}

/// Exponentiated-gradient update of the group weights.
///
/// `losses[g]` is `None` for groups absent from the batch: their weight is
/// carried over unchanged and the present groups share their previous mass.
pub fn groupdro_reweight(q: &[f64], losses: &[Option<f64>], eta: f64) -> Result<Vec<f64>> {
    check_dim("group losses", q.len(), losses.len())?;
    if q.is_empty() {
        return Err(Error::Empty("group weights".into()));
    }
    if q.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::OutOfRange("group weights must be positive".into()));
    }
    if let Some(bad) = losses.iter().flatten().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("group loss {bad}")));
    }
    let present: Vec<usize> = (0..q.len()).filter(|&g| losses[g].is_some()).collect();
    let mut out = q.to_vec();
    if present.is_empty() {
        return Ok(out);
    }
    let mass: f64 = present.iter().map(|&g| q[g]).sum();
    let shift = present
        .iter()
        .map(|&g| eta * losses[g].unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = present
        .iter()
        .map(|&g| q[g] * (eta * losses[g].unwrap() - shift).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    for (&g, r) in present.iter().zip(raw) {
        // keep every weight strictly positive
        out[g] = (mass * r / total).max(f64::MIN_POSITIVE);
    }
    let norm: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= norm);
    Ok(out)
}

/// Per-sample weights realizing `Σ_g q_g ℓ_g` over the cells present in the
/// first `n_weighted` rows, scaled to their share of the batch. Remaining rows
/// (replayed samples) keep the uniform weight `1/n`.
pub fn cell_weights(cells: &[Option<usize>], q: &[f64], n_weighted: usize) -> Vec<f64> {
    let n = cells.len() as f64;
    let mut counts = vec![0usize; q.len()];
    for c in cells[..n_weighted].iter().flatten() {
        counts[*c] += 1;
    }
    let mass: f64 = counts
        .iter()
        .zip(q)
        .filter(|(c, _)| **c > 0)
        .map(|(_, w)| w)
        .sum();
    let share = n_weighted as f64 / n;
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| match c {
            Some(c) if i < n_weighted => share * q[*c] / (mass * counts[*c] as f64),
            _ => 1.0 / n,
        })
        .collect()
}

/// Online-EWC regularizer.
pub struct EwcTerm<'a> {
    pub anchors: &'a [Vec<f64>],
    pub fisher: &'a [Vec<f64>],
    pub lambda: f64,
}

/// LwF distillation against a frozen snapshot.
pub struct LwfTerm<'a> {
    pub old: &'a MlpModel,
    /// `(head, columns)`: distill the first `columns` logits of each head.
    pub heads: Vec<(usize, usize)>,
    pub lambda: f64,
    pub temperature: f64,
}

/// Cross-entropy (optionally per-sample weighted) plus the enabled
/// regularizers. Tensors that receive no gradient stay untouched.
pub struct MethodObjective<'a> {
    pub routing: &'a HeadRouting,
    pub train_trunk: bool,
    /// Per-sample weights summing to one; uniform when absent.
    pub sample_weights: Option<Vec<f64>>,
    pub ewc: Option<EwcTerm<'a>>,
    pub lwf: Option<LwfTerm<'a>>,
}

impl<'a> MethodObjective<'a> {
    pub fn cross_entropy(routing: &'a HeadRouting, train_trunk: bool) -> Self {
        Self {
            routing,
            train_trunk,
            sample_weights: None,
            ewc: None,
            lwf: None,
        }
    }
}

impl Objective for MethodObjective<'_> {
    fn evaluate(&self, model: &MlpModel, batch: &Batch) -> Result<(f64, Gradients)> {
        let pass = RoutedPass::forward(model, batch, self.routing)?;
        let n = batch.len();
        let weights = match &self.sample_weights {
            Some(w) => {
                check_dim("sample weights", n, w.len())?;
                w.clone()
            }
            None => vec![1.0 / n as f64; n],
        };
        let mut grads = Gradients::empty(model);
        let mut loss = pass.weighted_loss(&weights);
        let mut dfeat = pass.backward_heads(model, &weights, &mut grads)?;

        if let Some(lwf) = self.lwf.as_ref().filter(|l| l.lambda != 0.0 && !l.heads.is_empty()) {
            let old_features = lwf.old.extract_features(batch.inputs.view())?;
            let scale = lwf.lambda / lwf.heads.len() as f64;
            for &(head, cols) in &lwf.heads {
                let new_logits = model.head_logits(head, pass.features().view())?;
                let old_logits = lwf.old.head_logits(head, old_features.view())?;
                if cols > new_logits.ncols() || cols > old_logits.ncols() {
                    return Err(Error::OutOfRange(format!("distilling {cols} columns of head {head}")));
                }
                let (d, g) = distillation(
                    new_logits.slice(s![.., ..cols]),
                    old_logits.slice(s![.., ..cols]),
                    lwf.temperature,
                )?;
                loss += scale * d;
                let mut dlogits = Array2::zeros(new_logits.raw_dim());
                dlogits.slice_mut(s![.., ..cols]).assign(&(g * scale));
                dfeat += &model.head_backward(head, pass.features().view(), dlogits.view(), &mut grads)?;
            }
        }

        if self.train_trunk {
            model.trunk_backward(pass.cache(), dfeat, &mut grads);
        }

        if let Some(ewc) = self.ewc.as_ref().filter(|e| e.lambda != 0.0) {
            check_dim("ewc anchors", ewc.anchors.len(), ewc.fisher.len())?;
            let mut penalty = 0.0;
            for (i, (a, f)) in ewc.anchors.iter().zip(ewc.fisher).enumerate() {
                let p = model.tensor(i);
                let mut term = 0.0;
                for ((p, a), f) in p.iter().zip(a).zip(f) {
                    term += f * (p - a) * (p - a);
                }
                penalty += term;
                // only tensors that take part in this step are pulled toward the anchor
                if grads.slot(i).is_some() {
                    let len = p.len();
                    let pull: Vec<f64> = p
                        .iter()
                        .zip(a)
                        .zip(f)
                        .map(|((p, a), f)| ewc.lambda * f * (p - a))
                        .collect();
                    grads.accumulate(i, len, pull.iter());
                }
            }
            loss += 0.5 * ewc.lambda * penalty;
        }
        Ok((loss, grads))
    }
}
