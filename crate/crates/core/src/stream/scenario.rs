use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Scenario, StreamGeometry, TaskSpec, TaskStream, MAX_BIAS_LEVEL};
use crate::error::{Error, Result};
use crate::seed::{Purpose, SeedStreams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// T1 biased (default level 6), T2 unbiased.
    #[serde(rename = "two-task-forward")]
    TwoTaskForward,
    /// T1 unbiased, T2 biased.
    #[serde(rename = "two-task-backward")]
    TwoTaskBackward,
    /// Ten unbiased tasks except the first or last one.
    #[serde(rename = "ten-task-endpoints")]
    TenTaskEndpoints,
    /// Five tasks; a chosen number of the first four carry the same bias.
    #[serde(rename = "accumulation-same-bias")]
    AccumulationSameBias,
    /// Three tasks, two spurious attributes: T1 biased on the first, T2 on
    /// the second, T3 unbiased.
    #[serde(rename = "accumulation-two-attributes")]
    AccumulationTwoAttributes,
    /// Every task draws a bias level uniformly from 0..=6.
    #[serde(rename = "random-levels")]
    RandomLevels,
    /// T1 unbiased, T2 at level 6, followed by a Group DRO re-training stage.
    #[serde(rename = "naive-debias-3stage")]
    NaiveDebias3Stage,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::TwoTaskForward,
        Preset::TwoTaskBackward,
        Preset::TenTaskEndpoints,
        Preset::AccumulationSameBias,
        Preset::AccumulationTwoAttributes,
        Preset::RandomLevels,
        Preset::NaiveDebias3Stage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::TwoTaskForward => "two-task-forward",
            Preset::TwoTaskBackward => "two-task-backward",
            Preset::TenTaskEndpoints => "ten-task-endpoints",
            Preset::AccumulationSameBias => "accumulation-same-bias",
            Preset::AccumulationTwoAttributes => "accumulation-two-attributes",
            Preset::RandomLevels => "random-levels",
            Preset::NaiveDebias3Stage => "naive-debias-3stage",
        }
    }

    fn default_tasks(self) -> usize {
        match self {
            Preset::TwoTaskForward | Preset::TwoTaskBackward | Preset::NaiveDebias3Stage => 2,
            Preset::TenTaskEndpoints | Preset::RandomLevels => 10,
            Preset::AccumulationSameBias => 5,
            Preset::AccumulationTwoAttributes => 3,
        }
    }

    fn fixed_tasks(self) -> Option<usize> {
        match self {
            Preset::TwoTaskForward | Preset::TwoTaskBackward | Preset::NaiveDebias3Stage => Some(2),
            Preset::AccumulationTwoAttributes => Some(3),
            _ => None,
        }
    }

    fn default_level(self) -> u8 {
        match self {
            Preset::AccumulationSameBias => 4,
            _ => MAX_BIAS_LEVEL,
        }
    }

    fn default_family(self) -> Scenario {
        match self {
            Preset::AccumulationTwoAttributes => Scenario::DomainIl,
            _ => Scenario::TaskIl,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoint {
    #[default]
    First,
    Last,
}

/// Scenario description; every field except `preset` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub preset: Preset,
    pub family: Option<Scenario>,
    pub tasks: Option<usize>,
    pub classes_per_task: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Level given to the preset's biased task(s).
    pub bias_level: Option<u8>,
    /// Which end is biased in `ten-task-endpoints`.
    pub endpoint: Endpoint,
    /// Number of biased tasks in `accumulation-same-bias`.
    pub biased_tasks: usize,
    /// Task that receives the watermarked bias class (adds a watermark channel).
    pub bias_class_task: Option<usize>,
    /// Number of spurious attribute blocks; defaults per preset.
    pub attributes: Option<usize>,
    /// Explicit per-task, per-channel levels; overrides the preset's levels.
    pub levels: Option<Vec<Vec<u8>>>,
    pub spurious_strength: f64,
    pub core_noise: f64,
    pub prototype_scale: f64,
    pub core_dim: usize,
    pub spurious_dim: usize,
    /// Data seed; the run seed is used when absent.
    pub seed: Option<u64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let geometry = StreamGeometry::default();
        Self {
            preset: Preset::TwoTaskForward,
            family: None,
            tasks: None,
            classes_per_task: 2,
            n_train: 250,
            n_test: 100,
            bias_level: None,
            endpoint: Endpoint::First,
            biased_tasks: 0,
            bias_class_task: None,
            attributes: None,
            levels: None,
            spurious_strength: 1.0,
            core_noise: 0.5,
            prototype_scale: geometry.prototype_scale,
            core_dim: geometry.core_dim,
            spurious_dim: geometry.spurious_dim,
            seed: None,
        }
    }
}

impl ScenarioConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            ..Self::default()
        }
    }

    pub fn family(&self) -> Scenario {
        self.family.unwrap_or(self.preset.default_family())
    }

    pub fn task_count(&self) -> usize {
        self.tasks.unwrap_or(self.preset.default_tasks())
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.unwrap_or(match self.preset {
            Preset::AccumulationTwoAttributes => 2,
            _ if self.bias_class_task.is_some() && self.family() == Scenario::ClassIl => 0,
            _ => 1,
        })
    }

    /// Primary-channel level of the preset's biased task(s).
    pub fn biased_level(&self) -> u8 {
        self.bias_level.unwrap_or(self.preset.default_level())
    }
}

/// Builds the deterministic task stream described by `config`.
pub fn make_scenario(config: &ScenarioConfig, run_seed: u64) -> Result<TaskStream> {
    let seed = config.seed.unwrap_or(run_seed);
    let family = config.family();
    let tasks = config.task_count();
    if let Some(fixed) = config.preset.fixed_tasks() {
        if tasks != fixed {
            return Err(Error::Incompatible(format!(
                "preset {} has {fixed} tasks, config asks for {tasks}",
                config.preset
            )));
        }
    }
    if tasks == 0 || config.classes_per_task == 0 {
        return Err(Error::InvalidSpec("need at least one task and one class".into()));
    }
    let attributes = config.attribute_count();
    if config.preset == Preset::AccumulationTwoAttributes && attributes < 2 {
        return Err(Error::Incompatible("two-attribute preset needs two attributes".into()));
    }
    let watermark = config.bias_class_task.is_some();
    if let Some(t) = config.bias_class_task {
        if t >= tasks {
            return Err(Error::OutOfRange(format!("bias class task {t} of {tasks}")));
        }
    }
    if attributes == 0 && !watermark {
        return Err(Error::Incompatible("stream has no bias channel".into()));
    }
    let channels = attributes + usize::from(watermark);
    let mut scenario_rng = SeedStreams::new(seed).rng(Purpose::Scenario);

    let levels: Vec<Vec<u8>> = match &config.levels {
        Some(levels) => {
            if levels.len() != tasks || levels.iter().any(|l| l.len() != channels) {
                return Err(Error::InvalidSpec(format!(
                    "levels must be {tasks} rows of {channels} channel levels"
                )));
            }
            levels.clone()
        }
        None => {
            let level = config.biased_level();
            let primary: Vec<u8> = match config.preset {
                Preset::TwoTaskForward => vec![level, 0],
                Preset::TwoTaskBackward | Preset::NaiveDebias3Stage => vec![0, level],
                Preset::TenTaskEndpoints => {
                    let mut v = vec![0; tasks];
                    match config.endpoint {
                        Endpoint::First => v[0] = level,
                        Endpoint::Last => v[tasks - 1] = level,
                    }
                    v
                }
                Preset::AccumulationSameBias => {
                    if config.biased_tasks >= tasks {
                        return Err(Error::OutOfRange(format!(
                            "{} biased tasks among the first {}",
                            config.biased_tasks,
                            tasks - 1
                        )));
                    }
                    let mut v = vec![0; tasks];
                    for i in sample(&mut scenario_rng, tasks - 1, config.biased_tasks) {
                        v[i] = level;
                    }
                    v
                }
                Preset::RandomLevels => (0..tasks)
                    .map(|_| scenario_rng.random_range(0..=MAX_BIAS_LEVEL))
                    .collect(),
                Preset::AccumulationTwoAttributes => vec![level, 0, 0],
            };
            primary
                .iter()
                .enumerate()
                .map(|(t, &p)| {
                    let mut row = vec![0u8; channels];
                    if config.preset == Preset::AccumulationTwoAttributes {
                        // T1 skews the first attribute, T2 the second.
                        if t < 2 {
                            row[t] = level;
                        }
                    } else if channels > 0 {
                        row[0] = p;
                    }
                    if watermark {
                        row[channels - 1] = p;
                    }
                    row
                })
                .collect()
        }
    };

    let geometry = StreamGeometry {
        core_dim: config.core_dim,
        spurious_dim: config.spurious_dim,
        attributes,
        watermark,
        group_count: 2,
        prototype_scale: config.prototype_scale,
        watermark_value: 2.0 * config.spurious_strength,
        seed,
    };

    let c = config.classes_per_task;
    let specs = (0..tasks)
        .map(|t| {
            let classes: Vec<usize> = match family {
                Scenario::DomainIl => (0..c).collect(),
                Scenario::TaskIl | Scenario::ClassIl => (t * c..(t + 1) * c).collect(),
            };
            let bias_class = (config.bias_class_task == Some(t))
                .then(|| classes[scenario_rng.random_range(0..classes.len())]);
            TaskSpec {
                scenario: family,
                task: t,
                classes,
                bias_levels: levels[t].clone(),
                n_train: config.n_train,
                n_test: config.n_test,
                spurious_strength: config.spurious_strength,
                core_noise: config.core_noise,
                bias_class,
                seed,
            }
        })
        .collect();
    TaskStream::generate(geometry, specs)
}
