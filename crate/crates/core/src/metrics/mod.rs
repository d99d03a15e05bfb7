//! Accuracy matrices, stability/plasticity measures and bias metrics.

mod bias;
mod cka;

pub use bias::{bmr, dca, misclass_breakdown, Breakdown, ClassPartition};
pub use cka::{cka_bias_probe, cka_linear};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{HeadRouting, MlpModel};
use crate::stream::{to_batch, BiasedSample};

/// Maps samples to predicted global class ids.
pub trait Predictor {
    fn predict(&self, samples: &[&BiasedSample]) -> Result<Vec<usize>>;
}

/// Argmax over the head that `routing` assigns to `task`.
///
/// For per-task heads the prediction is restricted to that task's classes;
/// for a shared head it ranges over every class the head currently covers.
pub struct HeadPredictor<'a> {
    pub model: &'a MlpModel,
    pub routing: &'a HeadRouting,
    pub task: usize,
}

impl Predictor for HeadPredictor<'_> {
    fn predict(&self, samples: &[&BiasedSample]) -> Result<Vec<usize>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let batch = to_batch(samples)?;
        let logits = self.model.forward_batch(&batch, self.routing.head(self.task))?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| self.routing.class_of(self.task, argmax(row.as_slice().expect("row"))))
            .collect())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose predicted class equals the label.
pub fn accuracy(predictor: &dyn Predictor, samples: &[&BiasedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("accuracy dataset".into()));
    }
    let predicted = predictor.predict(samples)?;
    let correct = predicted
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.class)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// `rows[l][j]`: accuracy on task `j` after learning task `l` (`j <= l`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    /// `A*[j][j]` of the paired fine-tuning run.
    pub reference_diagonal: Option<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::DimensionMismatch {
                context: "accuracy matrix row",
                expected: self.rows.len() + 1,
                found: row.len(),
            });
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::OutOfRange("accuracy outside [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn task_count(&self) -> usize {
        self.rows.len()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(l, r)| r[l]).collect()
    }

    /// Mean accuracy over all tasks after learning `tasks` tasks.
    pub fn average_accuracy(&self, tasks: usize) -> Result<f64> {
        let row = self.row(tasks)?;
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    fn row(&self, tasks: usize) -> Result<&Vec<f64>> {
        if tasks == 0 || tasks > self.rows.len() {
            return Err(Error::OutOfRange(format!(
                "{tasks} tasks learned, matrix has {} rows",
                self.rows.len()
            )));
        }
        Ok(&self.rows[tasks - 1])
    }

    /// Average drop from each old task's best earlier accuracy, after
    /// learning `tasks` tasks (`tasks >= 2`).
    pub fn forgetting(&self, tasks: usize) -> Result<f64> {
        if tasks < 2 {
            return Err(Error::OutOfRange("forgetting needs at least two tasks".into()));
        }
        let last = self.row(tasks)?;
        let mut total = 0.0;
        for j in 0..tasks - 1 {
            // only models that have seen task j can be evaluated on it
            let best = (j..tasks - 1)
                .map(|l| self.rows[l][j])
                .fold(f64::NEG_INFINITY, f64::max);
            total += best - last[j];
        }
        Ok(total / (tasks - 1) as f64)
    }

    /// Average accuracy shortfall on the task just learned, relative to the
    /// fine-tuning reference, over the first `tasks` tasks.
    pub fn intransigence(&self, tasks: usize) -> Result<f64> {
        let reference = self
            .reference_diagonal
            .as_ref()
            .ok_or_else(|| Error::Missing("fine-tuning reference diagonal".into()))?;
        if reference.len() < tasks {
            return Err(Error::Missing(format!(
                "reference covers {} of {tasks} tasks",
                reference.len()
            )));
        }
        self.row(tasks)?;
        let total: f64 = (0..tasks).map(|j| reference[j] - self.rows[j][j]).sum();
        Ok(total / tasks as f64)
    }
}

/// Min-max normalization of F−I values across a sweep.
///
/// Returns the normalized values and whether the sweep was degenerate (all
/// values equal), in which case every value maps to 0.5.
pub fn normalize_fi(values: &[f64]) -> Result<(Vec<f64>, bool)> {
    if values.len() < 2 {
        return Err(Error::Empty("normalization needs at least two values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("F-I value".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        log::warn!("degenerate F-I sweep: all {} values equal {min}", values.len());
        return Ok((vec![0.5; values.len()], true));
    }
    Ok((values.iter().map(|v| (v - min) / (max - min)).collect(), false))
}

/// Every measurement of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    /// Mean final-row accuracy.
    pub avg_accuracy: f64,
    /// `forgetting[t - 2]` is `F_t` for `t = 2..=T`.
    pub forgetting: Vec<f64>,
    /// `intransigence[t - 1]` is `I_t`.
    pub intransigence: Vec<f64>,
    /// `F_T − I_T` at the final task (0 forgetting for a single task).
    pub f_minus_i: f64,
    /// Filled in by a sweep.
    pub normalized_fi: Option<f64>,
    /// `bmr[l][j]` after learning task `l`, on task `j`; absent when no
    /// sample was classified correctly.
    pub bmr: Vec<Vec<Option<f64>>>,
    pub dca: Vec<Vec<Option<f64>>>,
    pub cka: Vec<Vec<Option<f64>>>,
    /// Mean final-row BMR over tasks where it is defined.
    pub avg_bmr: Option<f64>,
    pub avg_dca: Option<f64>,
    /// Final-model misclassification breakdown per task (Class-IL with a bias class).
    pub breakdown: Vec<Option<Breakdown>>,
    /// BMR per extra bias channel of the final model, `channel_bmr[c][j]`.
    pub channel_bmr: Vec<Vec<Option<f64>>>,
}

pub(crate) fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}
