use ndarray::Array2;

use crate::error::{check_dim, Error, Result};

/// A minibatch: one input row per sample plus its labels.
///
/// `class_labels` are global class ids; a [`HeadRouting`] maps them to a head
/// and a column within that head.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub class_labels: Vec<usize>,
    pub group_labels: Vec<u8>,
    pub task_ids: Vec<usize>,
}

impl Batch {
    pub fn new(
        inputs: Array2<f64>,
        class_labels: Vec<usize>,
        group_labels: Vec<u8>,
        task_ids: Vec<usize>,
    ) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::Empty("batch".into()));
        }
        check_dim("batch class labels", n, class_labels.len())?;
        check_dim("batch group labels", n, group_labels.len())?;
        check_dim("batch task ids", n, task_ids.len())?;
        Ok(Self {
            inputs,
            class_labels,
            group_labels,
            task_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }
}

/// How a sample's (task, class) selects a head and a logit column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadRouting {
    /// One head per task; `offsets[t]` is the first global class id of task `t`.
    PerTask { offsets: Vec<usize> },
    /// A single head indexed directly by global class id.
    Shared,
}

impl HeadRouting {
    pub fn head(&self, task: usize) -> usize {
        match self {
            HeadRouting::PerTask { .. } => task,
            HeadRouting::Shared => 0,
        }
    }

    pub fn target(&self, task: usize, class: usize) -> Result<usize> {
        match self {
            HeadRouting::PerTask { offsets } => {
                let offset = *offsets.get(task).ok_or_else(|| {
                    Error::OutOfRange(format!("task {task} has no head offset"))
                })?;
                class.checked_sub(offset).ok_or_else(|| {
                    Error::OutOfRange(format!("class {class} precedes task {task} offset"))
                })
            }
            HeadRouting::Shared => Ok(class),
        }
    }

    /// Global class id of column `column` of the head used for `task`.
    pub fn class_of(&self, task: usize, column: usize) -> usize {
        match self {
            HeadRouting::PerTask { offsets } => offsets[task] + column,
            HeadRouting::Shared => column,
        }
    }
}
