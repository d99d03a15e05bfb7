//! Synthetic continual-learning streams with a controllable spurious feature.
//!
//! Every sample has the layout `[core | spurious block per attribute | watermark?]`.
//! The core block carries the class signal (a per-class prototype plus
//! Gaussian noise). Each spurious block is `+s·u` for group 0 and `-s·u` for
//! group 1, with `u` a fixed unit direction, so flipping a group is an exact
//! sign flip of that block. The optional watermark coordinate holds
//! `watermark_value` when present and `0` otherwise; it is injected into a
//! fraction `α` of one designated bias class's training samples.

mod io;
mod scenario;

pub use io::{read_records, write_memory_records, write_records, SampleRecord};
pub use scenario::{make_scenario, Endpoint, Preset, ScenarioConfig};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, HeadRouting};
use crate::seed::{Purpose, Rng, SeedStreams};

pub const MAX_BIAS_LEVEL: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    TaskIl,
    DomainIl,
    ClassIl,
}

/// Fraction of a class's training samples drawn from its majority group.
///
/// The minority fraction `1 - α` falls geometrically from 0.5 at level 0 to
/// 0.01 at level 6.
pub fn skew_ratio(level: u8) -> Result<f64> {
    if level > MAX_BIAS_LEVEL {
        return Err(Error::OutOfRange(format!("bias level {level} not in 0..=6")));
    }
    Ok(1.0 - 0.5 * 0.02f64.powf(f64::from(level) / f64::from(MAX_BIAS_LEVEL)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedSample {
    pub features: Vec<f64>,
    /// One group label per bias channel (spurious attributes, then watermark).
    pub groups: Vec<u8>,
    pub class: usize,
    pub task: usize,
}

impl BiasedSample {
    /// Group label of the primary bias channel.
    pub fn group(&self) -> u8 {
        self.groups[0]
    }
}

/// A test sample with its bias-flipped counterpart on every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPair {
    pub original: BiasedSample,
    pub flipped: Vec<BiasedSample>,
}

/// Coordinate layout and stream-wide random structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamGeometry {
    pub core_dim: usize,
    pub spurious_dim: usize,
    /// Number of independent spurious attribute blocks.
    pub attributes: usize,
    pub watermark: bool,
    pub group_count: usize,
    /// Standard deviation of class prototype coordinates.
    pub prototype_scale: f64,
    /// Watermark coordinate value when present.
    pub watermark_value: f64,
    pub seed: u64,
}

impl Default for StreamGeometry {
    fn default() -> Self {
        Self {
            core_dim: 16,
            spurious_dim: 4,
            attributes: 1,
            watermark: false,
            group_count: 2,
            prototype_scale: 0.25,
            watermark_value: 2.0,
            seed: 0,
        }
    }
}

const PROTOTYPE_STREAM: u64 = 1 << 20;
const DIRECTION_STREAM: u64 = 1 << 21;
const ROTATION_STREAM: u64 = 1 << 22;

impl StreamGeometry {
    pub fn feature_dim(&self) -> usize {
        self.core_dim + self.spurious_dim * self.attributes + usize::from(self.watermark)
    }

    pub fn channel_count(&self) -> usize {
        self.attributes + usize::from(self.watermark)
    }

    pub fn is_watermark_channel(&self, channel: usize) -> bool {
        self.watermark && channel == self.attributes
    }

    fn spurious_range(&self, attribute: usize) -> std::ops::Range<usize> {
        let start = self.core_dim + attribute * self.spurious_dim;
        start..start + self.spurious_dim
    }

    fn watermark_index(&self) -> usize {
        self.core_dim + self.attributes * self.spurious_dim
    }

    fn streams(&self) -> SeedStreams {
        SeedStreams::new(self.seed)
    }

    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let mut rng = self.streams().rng_indexed(Purpose::Data, PROTOTYPE_STREAM | class as u64);
        let normal = Normal::new(0.0, self.prototype_scale).expect("finite scale");
        (0..self.core_dim).map(|_| normal.sample(&mut rng)).collect()
    }

    /// Unit direction of a spurious attribute block.
    pub fn spurious_direction(&self, attribute: usize) -> Vec<f64> {
        let mut rng = self
            .streams()
            .rng_indexed(Purpose::Data, DIRECTION_STREAM | attribute as u64);
        let mut u: Vec<f64> = (0..self.spurious_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        u
    }

    /// Orthogonal matrix (row-major `d × d`) applied to the core block of
    /// task `task` in Domain-IL streams. Task 0 is the identity.
    pub fn core_rotation(&self, task: usize) -> Array2<f64> {
        let d = self.core_dim;
        if task == 0 {
            return Array2::eye(d);
        }
        let mut rng = self
            .streams()
            .rng_indexed(Purpose::Data, ROTATION_STREAM | task as u64);
        let mut q: Array2<f64> = Array2::from_shape_fn((d, d), |_| StandardNormal.sample(&mut rng));
        for i in 0..d {
            for j in 0..i {
                let proj = q.row(i).dot(&q.row(j));
                let prev = q.row(j).to_owned();
                q.row_mut(i).scaled_add(-proj, &prev);
            }
            let norm = q.row(i).dot(&q.row(i)).sqrt();
            q.row_mut(i).mapv_inplace(|x| x / norm);
        }
        q
    }

    /// Spurious component written for `group` on an attribute block.
    fn write_group(&self, features: &mut [f64], attribute: usize, group: u8, strength: f64) {
        let sign = if group == 0 { 1.0 } else { -1.0 };
        let u = self.spurious_direction(attribute);
        for (slot, ui) in features[self.spurious_range(attribute)].iter_mut().zip(u) {
            *slot = sign * strength * ui;
        }
    }

    /// Swaps the sample's group on `channel`, leaving every other coordinate
    /// bit-identical. Applying it twice restores the sample exactly.
    pub fn bias_flip(&self, sample: &BiasedSample, channel: usize) -> Result<BiasedSample> {
        if self.group_count != 2 {
            return Err(Error::Incompatible(format!(
                "bias flip needs binary groups, stream has {}",
                self.group_count
            )));
        }
        if channel >= self.channel_count() {
            return Err(Error::OutOfRange(format!("bias channel {channel}")));
        }
        if sample.features.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                context: "bias flip features",
                expected: self.feature_dim(),
                found: sample.features.len(),
            });
        }
        let mut out = sample.clone();
        if self.is_watermark_channel(channel) {
            let idx = self.watermark_index();
            out.features[idx] = if sample.groups[channel] == 1 {
                0.0
            } else {
                self.watermark_value
            };
        } else {
            for x in &mut out.features[self.spurious_range(channel)] {
                *x = -*x;
            }
        }
        out.groups[channel] = 1 - sample.groups[channel];
        Ok(out)
    }
}

/// Per-task generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub scenario: Scenario,
    pub task: usize,
    /// Global class ids of this task, in order.
    pub classes: Vec<usize>,
    /// Bias level (0..=6) per channel.
    pub bias_levels: Vec<u8>,
    pub n_train: usize,
    pub n_test: usize,
    pub spurious_strength: f64,
    pub core_noise: f64,
    /// Global id of the class that carries the watermark, if any.
    pub bias_class: Option<usize>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn has_bias_class(&self) -> bool {
        self.bias_class.is_some()
    }

    /// Bias level of the primary channel.
    pub fn bias_level(&self) -> u8 {
        self.bias_levels.first().copied().unwrap_or(0)
    }

    pub fn validate(&self, geometry: &StreamGeometry) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidSpec(format!("task {} has no classes", self.task)));
        }
        if self.bias_levels.len() != geometry.channel_count() {
            return Err(Error::InvalidSpec(format!(
                "task {} has {} bias levels for {} channels",
                self.task,
                self.bias_levels.len(),
                geometry.channel_count()
            )));
        }
        for &level in &self.bias_levels {
            skew_ratio(level).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        }
        let groups = geometry.group_count;
        if self.n_train < groups || self.n_test < groups {
            return Err(Error::InvalidSpec(format!(
                "task {}: n_train and n_test must be at least {groups}",
                self.task
            )));
        }
        let patterns = 1usize << geometry.channel_count();
        if self.n_test % patterns != 0 {
            return Err(Error::InvalidSpec(format!(
                "task {}: n_test {} must be a multiple of {patterns} for group-balanced tests",
                self.task, self.n_test
            )));
        }
        let skewed_attribute = self.bias_levels[..geometry.attributes].iter().any(|&l| l > 0);
        if skewed_attribute && self.classes.len() % 2 == 1 {
            return Err(Error::InvalidSpec(format!(
                "task {}: {} classes cannot be split into two skew halves",
                self.task,
                self.classes.len()
            )));
        }
        if let Some(b) = self.bias_class {
            if !geometry.watermark {
                return Err(Error::InvalidSpec("bias class requires a watermark channel".into()));
            }
            if !self.classes.contains(&b) {
                return Err(Error::InvalidSpec(format!(
                    "bias class {b} is not a class of task {}",
                    self.task
                )));
            }
        }
        if !(self.core_noise >= 0.0 && self.spurious_strength > 0.0) {
            return Err(Error::InvalidSpec("noise must be >= 0 and strength > 0".into()));
        }
        Ok(())
    }
}

/// Generated train and paired test data for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTask {
    pub train: Vec<BiasedSample>,
    pub test: Vec<TestPair>,
}

/// Generates one task's training set (skewed per the spec's bias levels)
/// and its group-balanced test set with bias-flipped counterparts.
pub fn generate_task(spec: &TaskSpec, geometry: &StreamGeometry) -> Result<GeneratedTask> {
    spec.validate(geometry)?;
    let streams = SeedStreams::new(spec.seed);
    let mut train_rng = streams.rng_indexed(Purpose::Data, 2 * spec.task as u64);
    let mut test_rng = streams.rng_indexed(Purpose::Data, 2 * spec.task as u64 + 1);
    let rotation = (spec.scenario == Scenario::DomainIl).then(|| geometry.core_rotation(spec.task));
    let half = spec.classes.len() / 2;

    let mut train = Vec::with_capacity(spec.classes.len() * spec.n_train);
    for (position, &class) in spec.classes.iter().enumerate() {
        let prototype = geometry.prototype(class);
        let mut channel_groups: Vec<Vec<u8>> = Vec::with_capacity(geometry.channel_count());
        for channel in 0..geometry.channel_count() {
            let alpha = skew_ratio(spec.bias_levels[channel])?;
            let majority_count = (alpha * spec.n_train as f64).round() as usize;
            let labels = if geometry.is_watermark_channel(channel) {
                if spec.bias_class == Some(class) {
                    skewed_labels(spec.n_train, majority_count, 1)
                } else {
                    vec![0; spec.n_train]
                }
            } else {
                let majority = if position < half || spec.classes.len() == 1 { 0 } else { 1 };
                let mut labels = skewed_labels(spec.n_train, majority_count, majority);
                if channel > 0 {
                    labels.shuffle(&mut train_rng);
                }
                labels
            };
            channel_groups.push(labels);
        }
        for i in 0..spec.n_train {
            let groups: Vec<u8> = channel_groups.iter().map(|g| g[i]).collect();
            train.push(make_sample(
                spec,
                geometry,
                &prototype,
                rotation.as_ref(),
                class,
                groups,
                &mut train_rng,
            ));
        }
    }

    let channels = geometry.channel_count();
    let mut test = Vec::with_capacity(spec.classes.len() * spec.n_test);
    for &class in &spec.classes {
        let prototype = geometry.prototype(class);
        for i in 0..spec.n_test {
            let groups: Vec<u8> = (0..channels).map(|c| ((i >> c) & 1) as u8).collect();
            let original = make_sample(
                spec,
                geometry,
                &prototype,
                rotation.as_ref(),
                class,
                groups,
                &mut test_rng,
            );
            let flipped = (0..channels)
                .map(|c| geometry.bias_flip(&original, c))
                .collect::<Result<Vec<_>>>()?;
            test.push(TestPair { original, flipped });
        }
    }
    Ok(GeneratedTask { train, test })
}

fn skewed_labels(n: usize, majority_count: usize, majority: u8) -> Vec<u8> {
    (0..n)
        .map(|i| if i < majority_count { majority } else { 1 - majority })
        .collect()
}

fn make_sample(
    spec: &TaskSpec,
    geometry: &StreamGeometry,
    prototype: &[f64],
    rotation: Option<&Array2<f64>>,
    class: usize,
    groups: Vec<u8>,
    rng: &mut Rng,
) -> BiasedSample {
    let mut features = vec![0.0; geometry.feature_dim()];
    let noise = Normal::new(0.0, spec.core_noise.max(0.0)).expect("finite noise");
    let core: Vec<f64> = prototype.iter().map(|p| p + noise.sample(rng)).collect();
    match rotation {
        Some(r) => {
            let rotated = r.dot(&ndarray::ArrayView1::from(&core));
            features[..geometry.core_dim].copy_from_slice(rotated.as_slice().expect("contiguous"));
        }
        None => features[..geometry.core_dim].copy_from_slice(&core),
    }
    for attribute in 0..geometry.attributes {
        geometry.write_group(&mut features, attribute, groups[attribute], spec.spurious_strength);
    }
    if geometry.watermark && groups[geometry.attributes] == 1 {
        features[geometry.watermark_index()] = geometry.watermark_value;
    }
    BiasedSample {
        features,
        groups,
        class,
        task: spec.task,
    }
}

/// An ordered sequence of generated tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub geometry: StreamGeometry,
    pub specs: Vec<TaskSpec>,
    pub train: Vec<Vec<BiasedSample>>,
    pub test: Vec<Vec<TestPair>>,
}

impl TaskStream {
    pub fn generate(geometry: StreamGeometry, specs: Vec<TaskSpec>) -> Result<Self> {
        let mut train = Vec::with_capacity(specs.len());
        let mut test = Vec::with_capacity(specs.len());
        for spec in &specs {
            let task = generate_task(spec, &geometry)?;
            train.push(task.train);
            test.push(task.test);
        }
        let stream = Self {
            geometry,
            specs,
            train,
            test,
        };
        stream.check_scenario()?;
        Ok(stream)
    }

    fn check_scenario(&self) -> Result<()> {
        let Some(first) = self.specs.first() else {
            return Err(Error::InvalidSpec("stream has no tasks".into()));
        };
        for (t, spec) in self.specs.iter().enumerate() {
            if spec.scenario != first.scenario {
                return Err(Error::Incompatible("mixed scenarios in one stream".into()));
            }
            if spec.task != t {
                return Err(Error::InvalidSpec(format!("spec {t} carries task index {}", spec.task)));
            }
        }
        match first.scenario {
            Scenario::DomainIl => {
                if self.specs.iter().any(|s| s.classes != first.classes) {
                    return Err(Error::Incompatible("domain-il tasks must share classes".into()));
                }
            }
            Scenario::TaskIl | Scenario::ClassIl => {
                let mut seen = std::collections::BTreeSet::new();
                for spec in &self.specs {
                    for &c in &spec.classes {
                        if !seen.insert(c) {
                            return Err(Error::Incompatible(format!(
                                "class {c} appears in more than one task"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        self.specs[0].scenario
    }

    pub fn task_count(&self) -> usize {
        self.specs.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.geometry.feature_dim()
    }

    pub fn bias_levels(&self) -> Vec<u8> {
        self.specs.iter().map(TaskSpec::bias_level).collect()
    }

    pub fn bias_class(&self) -> Option<usize> {
        self.specs.iter().find_map(|s| s.bias_class)
    }

    pub fn routing(&self) -> HeadRouting {
        match self.scenario() {
            Scenario::TaskIl => HeadRouting::PerTask {
                offsets: self.specs.iter().map(|s| s.classes[0]).collect(),
            },
            Scenario::DomainIl | Scenario::ClassIl => HeadRouting::Shared,
        }
    }

    /// Width of the routed head while learning task `task` (Class-IL grows).
    pub fn head_width(&self, task: usize) -> usize {
        match self.scenario() {
            Scenario::TaskIl | Scenario::DomainIl => self.specs[task].classes.len(),
            Scenario::ClassIl => self.specs[..=task].iter().map(|s| s.classes.len()).sum(),
        }
    }

    /// Classes visible to the model after learning task `task`.
    pub fn classes_seen(&self, task: usize) -> Vec<usize> {
        let mut all: Vec<usize> = self.specs[..=task]
            .iter()
            .flat_map(|s| s.classes.iter().copied())
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn test_originals(&self, task: usize) -> Vec<BiasedSample> {
        self.test[task].iter().map(|p| p.original.clone()).collect()
    }

    /// Keeps only the first `tasks` tasks.
    pub fn truncated(&self, tasks: usize) -> Self {
        let tasks = tasks.min(self.task_count());
        Self {
            geometry: self.geometry.clone(),
            specs: self.specs[..tasks].to_vec(),
            train: self.train[..tasks].to_vec(),
            test: self.test[..tasks].to_vec(),
        }
    }
}

/// Stacks samples into a [`Batch`].
pub fn to_batch(samples: &[&BiasedSample]) -> Result<Batch> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Empty("batch".into()));
    }
    let d = samples[0].features.len();
    let mut inputs = Array2::zeros((n, d));
    for (mut row, s) in inputs.axis_iter_mut(Axis(0)).zip(samples) {
        if s.features.len() != d {
            return Err(Error::DimensionMismatch {
                context: "batch features",
                expected: d,
                found: s.features.len(),
            });
        }
        row.assign(&ndarray::ArrayView1::from(&s.features));
    }
    Batch::new(
        inputs,
        samples.iter().map(|s| s.class).collect(),
        samples.iter().map(|s| s.group()).collect(),
        samples.iter().map(|s| s.task).collect(),
    )
}

pub fn to_batch_owned(samples: &[BiasedSample]) -> Result<Batch> {
    let refs: Vec<&BiasedSample> = samples.iter().collect();
    to_batch(&refs)
}
