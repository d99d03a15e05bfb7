//! Continual-learning procedures over a task stream: fine-tuning,
//! model-freezing, online EWC, LwF, experience replay, PackNet and GDumb,
//! with optional Group DRO weighting and BGS head retraining.

mod objective;
mod packnet;

pub use objective::{
    cell_weights, empirical_fisher, ewc_consolidate, ewc_penalty, groupdro_reweight, EwcTerm,
    LwfTerm, MethodObjective,
};
pub use packnet::{masked_model, packnet_prune};

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::ExemplarMemory;
use crate::nn::loss::RoutedPass;
use crate::nn::{
    cosine_lr, train_step, AdamWConfig, AdamWState, Gate, HeadMode, HeadRouting, MlpModel, Objective,
};
use crate::seed::{Purpose, Rng, SeedStreams};
use crate::stream::{to_batch, BiasedSample, Scenario, TaskStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fine-tuning")]
    FineTuning,
    #[serde(rename = "model-freezing")]
    ModelFreezing,
    #[serde(rename = "ewc")]
    Ewc,
    #[serde(rename = "lwf")]
    Lwf,
    #[serde(rename = "er")]
    Er,
    #[serde(rename = "packnet")]
    PackNet,
    #[serde(rename = "gdumb")]
    GDumb,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FineTuning,
        Method::ModelFreezing,
        Method::Ewc,
        Method::Lwf,
        Method::Er,
        Method::PackNet,
        Method::GDumb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FineTuning => "fine-tuning",
            Method::ModelFreezing => "model-freezing",
            Method::Ewc => "ewc",
            Method::Lwf => "lwf",
            Method::Er => "er",
            Method::PackNet => "packnet",
            Method::GDumb => "gdumb",
        }
    }

    /// The knob that trades stability for plasticity, with its search range.
    pub fn search_range(self) -> Option<(HyperKnob, f64, f64)> {
        match self {
            Method::Ewc => Some((HyperKnob::Lambda, 1e0, 1e9)),
            Method::Lwf => Some((HyperKnob::Lambda, 1e-2, 3e2)),
            Method::Er | Method::GDumb => Some((HyperKnob::MemoryFraction, 1e-3, 1e0)),
            Method::PackNet => Some((HyperKnob::PruningRatio, 1e-1, 8e-1)),
            Method::FineTuning | Method::ModelFreezing => None,
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Method::Er | Method::GDumb)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let alias = match s.as_str() {
            "ft" | "finetune" | "fine-tune" | "finetuning" => "fine-tuning",
            "freeze" | "freezing" => "model-freezing",
            other => other,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or(Error::UnknownMethod(s))
    }
}

/// Search range of the Group DRO weight learning rate.
pub const GROUPDRO_LR_RANGE: (f64, f64) = (1e-8, 1e2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperKnob {
    Lambda,
    MemoryFraction,
    PruningRatio,
    GroupdroLr,
}

impl HyperKnob {
    pub fn name(self) -> &'static str {
        match self {
            HyperKnob::Lambda => "lambda",
            HyperKnob::MemoryFraction => "memory_fraction",
            HyperKnob::PruningRatio => "pruning_ratio",
            HyperKnob::GroupdroLr => "groupdro_lr",
        }
    }

    pub fn get(self, hyper: &HyperConfig) -> f64 {
        match self {
            HyperKnob::Lambda => hyper.lambda,
            HyperKnob::MemoryFraction => hyper.memory_fraction,
            HyperKnob::PruningRatio => hyper.pruning_ratio,
            HyperKnob::GroupdroLr => hyper.groupdro_lr,
        }
    }

    pub fn set(self, hyper: &mut HyperConfig, value: f64) {
        match self {
            HyperKnob::Lambda => hyper.lambda = value,
            HyperKnob::MemoryFraction => hyper.memory_fraction = value,
            HyperKnob::PruningRatio => hyper.pruning_ratio = value,
            HyperKnob::GroupdroLr => hyper.groupdro_lr = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    /// EWC or LwF regularization strength.
    pub lambda: f64,
    /// Memory size as a fraction of the training samples of all tasks but the last.
    pub memory_fraction: f64,
    /// BGS memory fraction; falls back to `memory_fraction`.
    pub bgs_memory_fraction: Option<f64>,
    pub pruning_ratio: f64,
    pub groupdro_lr: f64,
    pub distill_temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub optimizer: AdamWConfig,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            memory_fraction: 0.1,
            bgs_memory_fraction: None,
            pruning_ratio: 0.5,
            groupdro_lr: 0.01,
            distill_temperature: 2.0,
            epochs: 20,
            batch_size: 32,
            hidden: vec![64, 64],
            optimizer: AdamWConfig::default(),
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let finite = [
            ("lambda", self.lambda),
            ("groupdro_lr", self.groupdro_lr),
            ("distill_temperature", self.distill_temperature),
        ];
        for (name, v) in finite {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::OutOfRange(format!("{name} = {v}")));
            }
        }
        if self.distill_temperature == 0.0 {
            return Err(Error::OutOfRange("distill_temperature must be positive".into()));
        }
        let fractions = [
            ("memory_fraction", Some(self.memory_fraction)),
            ("bgs_memory_fraction", self.bgs_memory_fraction),
            ("pruning_ratio", Some(self.pruning_ratio)),
        ];
        for (name, v) in fractions {
            if let Some(v) = v.filter(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::OutOfRange(format!("{name} = {v} not in [0, 1]")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::OutOfRange("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Checks the method's knob (and the Group DRO rate when enabled)
    /// against the search ranges used for sweeps.
    pub fn check_search_range(&self, method: Method, groupdro: bool) -> Result<()> {
        let mut checks = Vec::new();
        if let Some(range) = method.search_range() {
            checks.push(range);
        }
        if groupdro {
            checks.push((HyperKnob::GroupdroLr, GROUPDRO_LR_RANGE.0, GROUPDRO_LR_RANGE.1));
        }
        for (knob, lo, hi) in checks {
            let v = knob.get(self);
            if !(lo..=hi).contains(&v) {
                return Err(Error::OutOfRange(format!(
                    "{} = {v} outside [{lo:e}, {hi:e}] for {method}",
                    knob.name()
                )));
            }
        }
        Ok(())
    }

    fn bgs_fraction(&self) -> f64 {
        self.bgs_memory_fraction.unwrap_or(self.memory_fraction)
    }
}

/// `round(fraction · N)` where `N` counts the training samples of every task
/// except the last (all of them for a single-task stream).
pub fn memory_capacity(fraction: f64, stream: &TaskStream) -> usize {
    let tasks = stream.task_count();
    let upto = if tasks > 1 { tasks - 1 } else { tasks };
    let n: usize = stream.train[..upto].iter().map(Vec::len).sum();
    (fraction * n as f64).round() as usize
}

/// Network shape needed to build a model covering tasks `0..=t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub head_mode: HeadMode,
    pub routing: HeadRouting,
}

impl Architecture {
    pub fn build(&self, rng: &mut Rng) -> Result<MlpModel> {
        let (&first, rest) = self
            .head_widths
            .split_first()
            .ok_or_else(|| Error::InvalidSpec("architecture without heads".into()))?;
        let mut model = MlpModel::new(self.input_dim, &self.hidden, first, self.head_mode, rng);
        for &w in rest {
            model.add_head(w, rng)?;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    scenario: Scenario,
    input_dim: usize,
    routing: HeadRouting,
    task_classes: Vec<Vec<usize>>,
    group_count: usize,
}

impl Layout {
    fn from_stream(stream: &TaskStream) -> Self {
        Self {
            scenario: stream.scenario(),
            input_dim: stream.feature_dim(),
            routing: stream.routing(),
            task_classes: stream.specs.iter().map(|s| s.classes.clone()).collect(),
            group_count: stream.geometry.group_count,
        }
    }

    fn head_mode(&self) -> HeadMode {
        match self.scenario {
            Scenario::TaskIl => HeadMode::Multi,
            Scenario::DomainIl | Scenario::ClassIl => HeadMode::Single,
        }
    }

    fn architecture(&self, hidden: &[usize], upto: usize) -> Architecture {
        let widths = match self.scenario {
            Scenario::TaskIl => self.task_classes[..=upto].iter().map(Vec::len).collect(),
            Scenario::ClassIl => vec![self.task_classes[..=upto].iter().map(Vec::len).sum()],
            Scenario::DomainIl => vec![self.task_classes[0].len()],
        };
        Architecture {
            input_dim: self.input_dim,
            hidden: hidden.to_vec(),
            head_widths: widths,
            head_mode: self.head_mode(),
            routing: self.routing.clone(),
        }
    }

    /// Group DRO cell of a current-task sample: (class position, group).
    fn cell(&self, task: usize, sample: &BiasedSample) -> Option<usize> {
        let pos = self.task_classes[task].iter().position(|&c| c == sample.class)?;
        Some(pos * self.group_count + usize::from(sample.group()))
    }

    fn cell_count(&self, task: usize) -> usize {
        self.task_classes[task].len() * self.group_count
    }
}

/// Method-specific state carried between tasks.
#[derive(Debug, Clone)]
pub enum Aux {
    None,
    Ewc {
        anchors: Vec<Vec<f64>>,
        fisher: Vec<Vec<f64>>,
        tasks_seen: usize,
    },
    Lwf {
        old: Option<Box<MlpModel>>,
    },
    Er {
        memory: ExemplarMemory,
        seen: usize,
    },
    /// Per trunk layer, per weight: 0 free, `t` owned by task `t` (1-based).
    PackNet {
        masks: Vec<Vec<u32>>,
    },
    GDumb {
        memory: ExemplarMemory,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerOptions {
    /// Fill a group-class balanced memory and retrain the heads at the end.
    pub bgs: bool,
    /// Weight the current-task loss with Group DRO.
    pub groupdro: bool,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub model: MlpModel,
    pub optimizer: AdamWState,
    pub method: Method,
    pub hyper: HyperConfig,
    pub options: TrainerOptions,
    pub aux: Aux,
    pub bgs_memory: Option<ExemplarMemory>,
    /// Group DRO weights over the current task's (class, group) cells.
    pub group_weights: Option<Vec<f64>>,
    layout: Layout,
    seeds: SeedStreams,
    tasks_done: usize,
}

const PACKNET_STREAM: u64 = 10_000;
const GDUMB_STREAM: u64 = 20_000;
const BGS_STREAM: u64 = 30_000;
const DEBIAS_STREAM: u64 = 40_000;

impl TrainerState {
    pub fn new(
        method: Method,
        hyper: HyperConfig,
        options: TrainerOptions,
        stream: &TaskStream,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::from_stream(stream);
        if method == Method::PackNet && layout.scenario != Scenario::TaskIl {
            return Err(Error::Incompatible("packnet runs only in task-il".into()));
        }
        let seeds = SeedStreams::new(seed);
        let model = layout.architecture(&hyper.hidden, 0).build(&mut seeds.rng(Purpose::Init))?;
        let memory = |fraction: f64, index: u64| {
            ExemplarMemory::new(
                memory_capacity(fraction, stream),
                layout.group_count,
                seeds.rng_indexed(Purpose::Eviction, index),
            )
        };
        let aux = match method {
            Method::FineTuning | Method::ModelFreezing => Aux::None,
            Method::Ewc => Aux::Ewc {
                anchors: Vec::new(),
                fisher: Vec::new(),
                tasks_seen: 0,
            },
            Method::Lwf => Aux::Lwf { old: None },
            Method::Er => Aux::Er {
                memory: memory(hyper.memory_fraction, 0),
                seen: 0,
            },
            Method::PackNet => Aux::PackNet {
                masks: packnet::empty_masks(&model),
            },
            Method::GDumb => Aux::GDumb {
                memory: memory(hyper.memory_fraction, 2),
            },
        };
        let bgs_memory = options.bgs.then(|| memory(hyper.bgs_fraction(), 1));
        Ok(Self {
            optimizer: AdamWState::new(&model, hyper.optimizer),
            model,
            method,
            hyper,
            options,
            aux,
            bgs_memory,
            group_weights: None,
            layout,
            seeds,
            tasks_done: 0,
        })
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    pub fn routing(&self) -> &HeadRouting {
        &self.layout.routing
    }

    fn packnet_active(&self) -> bool {
        matches!(self.aux, Aux::PackNet { .. }) && self.hyper.pruning_ratio > 0.0
    }

    /// Model used to evaluate `task`: PackNet keeps only the weights owned by
    /// tasks up to and including `task`.
    pub fn eval_model(&self, task: usize) -> Result<Cow<'_, MlpModel>> {
        match &self.aux {
            Aux::PackNet { masks } if self.packnet_active() => {
                Ok(Cow::Owned(masked_model(&self.model, masks, task as u32 + 1)?))
            }
            _ => Ok(Cow::Borrowed(&self.model)),
        }
    }

    pub fn replay_memory(&self) -> Option<&ExemplarMemory> {
        match &self.aux {
            Aux::Er { memory, .. } | Aux::GDumb { memory } => Some(memory),
            _ => None,
        }
    }

    fn prepare_head(&mut self, task: usize) -> Result<()> {
        if task == 0 {
            return Ok(());
        }
        let mut rng = self.seeds.rng_indexed(Purpose::Init, task as u64);
        let width = self.layout.task_classes[task].len();
        match self.layout.scenario {
            Scenario::TaskIl => {
                self.model.add_head(width, &mut rng)?;
            }
            Scenario::ClassIl => self.model.widen_head(width, &mut rng)?,
            Scenario::DomainIl => {}
        }
        Ok(())
    }

    /// Heads (and logit columns) that LwF distills while learning `task`.
    fn lwf_heads(&self, task: usize) -> Vec<(usize, usize)> {
        if task == 0 {
            return Vec::new();
        }
        match self.layout.scenario {
            Scenario::TaskIl => (0..task).map(|j| (j, self.layout.task_classes[j].len())).collect(),
            Scenario::DomainIl => vec![(0, self.layout.task_classes[0].len())],
            Scenario::ClassIl => vec![(0, self.layout.task_classes[..task].iter().map(Vec::len).sum())],
        }
    }

    fn gates(&self, task: usize) -> Vec<Gate> {
        let Aux::PackNet { masks } = &self.aux else {
            return Vec::new();
        };
        if !self.packnet_active() {
            return Vec::new();
        }
        packnet_gates(&self.model, masks, task, 0)
    }

    /// Learns task `task` (0-based, strictly in order) from `train`.
    pub fn train_task(&mut self, task: usize, train: &[BiasedSample]) -> Result<()> {
        if task != self.tasks_done {
            return Err(Error::OutOfRange(format!(
                "expected task {}, got {task}",
                self.tasks_done
            )));
        }
        if task >= self.layout.task_classes.len() {
            return Err(Error::OutOfRange(format!("task {task} beyond the stream")));
        }
        if train.is_empty() {
            return Err(Error::Empty(format!("training data of task {task}")));
        }
        self.prepare_head(task)?;
        if matches!(self.aux, Aux::GDumb { .. }) {
            return self.gdumb_task(task, train);
        }

        let epochs = self.hyper.epochs;
        let base_lr = self.hyper.optimizer.learning_rate;
        let gates = self.gates(task);
        let train_trunk = !(self.method == Method::ModelFreezing && task > 0);
        let lwf_heads = self.lwf_heads(task);
        let mut order_rng = self.seeds.rng_indexed(Purpose::BatchOrder, task as u64);
        let mut replay_rng = self.seeds.rng_indexed(Purpose::Replay, task as u64);
        if self.options.groupdro {
            let cells = self.layout.cell_count(task);
            self.group_weights = Some(vec![1.0 / cells as f64; cells]);
        }
        self.optimizer = AdamWState::new(&self.model, self.hyper.optimizer);

        for epoch in 0..epochs {
            self.optimizer.hyper.learning_rate = cosine_lr(epoch, epochs, base_lr)?;
            for idx in epoch_batches(train.len(), self.hyper.batch_size, &mut order_rng) {
                let replay: Vec<BiasedSample> = match &self.aux {
                    Aux::Er { memory, .. } => memory
                        .draw(idx.len(), &mut replay_rng)
                        .into_iter()
                        .cloned()
                        .collect(),
                    _ => Vec::new(),
                };
                let samples: Vec<&BiasedSample> =
                    idx.iter().map(|&i| &train[i]).chain(replay.iter()).collect();
                let batch = to_batch(&samples)?;
                let sample_weights = match self.group_weights.as_mut().filter(|_| self.options.groupdro) {
                    Some(q) => Some(dro_weights(
                        q,
                        self.hyper.groupdro_lr,
                        &self.model,
                        &batch,
                        &samples,
                        idx.len(),
                        |s| self.layout.cell(task, s),
                        &self.layout.routing,
                    )?),
                    None => None,
                };
                let objective = MethodObjective {
                    routing: &self.layout.routing,
                    train_trunk,
                    sample_weights,
                    ewc: match &self.aux {
                        Aux::Ewc { anchors, fisher, .. } if !anchors.is_empty() => Some(EwcTerm {
                            anchors,
                            fisher,
                            lambda: self.hyper.lambda,
                        }),
                        _ => None,
                    },
                    lwf: match &self.aux {
                        Aux::Lwf { old: Some(old) } => Some(LwfTerm {
                            old,
                            heads: lwf_heads.clone(),
                            lambda: self.hyper.lambda,
                            temperature: self.hyper.distill_temperature,
                        }),
                        _ => None,
                    },
                };
                train_step(&mut self.model, &mut self.optimizer, &batch, &objective, &gates)
                    .map_err(|e| e.context(format!("task {task}, epoch {epoch}")))?;

                if epoch == 0 {
                    for &i in &idx {
                        self.observe(task, &train[i])?;
                    }
                }
            }
        }
        self.optimizer.hyper.learning_rate = base_lr;
        self.finish_task(task, train)?;
        self.tasks_done += 1;
        Ok(())
    }

    /// Memory admission of one streamed sample.
    fn observe(&mut self, task: usize, sample: &BiasedSample) -> Result<()> {
        if let Aux::Er { memory, seen } = &mut self.aux {
            *seen += 1;
            memory.reservoir_update(sample.clone(), *seen)?;
        }
        if let Some(bgs) = &mut self.bgs_memory {
            bgs.bgs_update(sample.clone(), task);
        }
        Ok(())
    }

    fn finish_task(&mut self, task: usize, train: &[BiasedSample]) -> Result<()> {
        match &mut self.aux {
            Aux::Ewc {
                anchors,
                fisher,
                tasks_seen,
            } => {
                let task_fisher = empirical_fisher(&self.model, train, &self.layout.routing)?;
                *fisher = ewc_consolidate(fisher, &task_fisher, *tasks_seen)?;
                *anchors = self.model.snapshot();
                *tasks_seen += 1;
            }
            Aux::Lwf { old } => *old = Some(Box::new(self.model.clone())),
            Aux::PackNet { .. } if self.hyper.pruning_ratio > 0.0 => self.packnet_finish(task, train)?,
            _ => {}
        }
        Ok(())
    }

    fn packnet_finish(&mut self, task: usize, train: &[BiasedSample]) -> Result<()> {
        let Aux::PackNet { masks } = &mut self.aux else {
            unreachable!("packnet state")
        };
        let owner = task as u32 + 1;
        for (layer, mask) in masks.iter_mut().enumerate() {
            *mask = packnet_prune(self.model.tensor(2 * layer), mask, owner, self.hyper.pruning_ratio, layer)?;
        }
        packnet::zero_free(&mut self.model, masks);
        let gates = packnet_gates(&self.model, masks, task, owner);
        let epochs = retrain_epochs(self.hyper.epochs);
        let data: Vec<&BiasedSample> = train.iter().collect();
        let objective = MethodObjective::cross_entropy(&self.layout.routing, true);
        let mut order = self.seeds.rng_indexed(Purpose::BatchOrder, PACKNET_STREAM + task as u64);
        fit(&mut self.model, &data, &self.hyper, epochs, &mut order, &gates, &objective)?;
        let mut init = self.seeds.rng_indexed(Purpose::Init, PACKNET_STREAM + task as u64);
        packnet::reinit_free(&mut self.model, masks, &mut init);
        Ok(())
    }

    fn gdumb_task(&mut self, task: usize, train: &[BiasedSample]) -> Result<()> {
        let mut order = self.seeds.rng_indexed(Purpose::BatchOrder, task as u64);
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut order);
        for &i in &idx {
            if let Aux::GDumb { memory } = &mut self.aux {
                memory.gdumb_update(train[i].clone(), task);
            }
            if let Some(bgs) = &mut self.bgs_memory {
                bgs.bgs_update(train[i].clone(), task);
            }
        }
        let Aux::GDumb { memory } = &self.aux else {
            unreachable!("gdumb state")
        };
        let arch = self.layout.architecture(&self.hyper.hidden, task);
        self.model = gdumb_train(memory, &arch, &self.hyper, self.seeds.master())?;
        self.optimizer = AdamWState::new(&self.model, self.hyper.optimizer);
        self.tasks_done += 1;
        Ok(())
    }

    /// Re-trains the whole network on `train` (the current task) with the
    /// Group DRO objective, starting from uniform weights.
    pub fn groupdro_retrain(&mut self, task: usize, train: &[BiasedSample]) -> Result<()> {
        if task + 1 != self.tasks_done {
            return Err(Error::OutOfRange(format!("task {task} is not the last learned task")));
        }
        if train.is_empty() {
            return Err(Error::Empty("group dro retraining data".into()));
        }
        let epochs = self.hyper.epochs;
        let cells = self.layout.cell_count(task);
        let mut q = vec![1.0 / cells as f64; cells];
        let mut order = self.seeds.rng_indexed(Purpose::BatchOrder, DEBIAS_STREAM + task as u64);
        let mut state = AdamWState::new(&self.model, self.hyper.optimizer);
        for epoch in 0..epochs {
            state.hyper.learning_rate = cosine_lr(epoch, epochs, self.hyper.optimizer.learning_rate)?;
            for idx in epoch_batches(train.len(), self.hyper.batch_size, &mut order) {
                let samples: Vec<&BiasedSample> = idx.iter().map(|&i| &train[i]).collect();
                let batch = to_batch(&samples)?;
                let weights = dro_weights(
                    &mut q,
                    self.hyper.groupdro_lr,
                    &self.model,
                    &batch,
                    &samples,
                    samples.len(),
                    |s| self.layout.cell(task, s),
                    &self.layout.routing,
                )?;
                let objective = MethodObjective {
                    sample_weights: Some(weights),
                    ..MethodObjective::cross_entropy(&self.layout.routing, true)
                };
                train_step(&mut self.model, &mut state, &batch, &objective, &[])?;
            }
        }
        self.group_weights = Some(q);
        Ok(())
    }

    /// BGS stage: head-only retraining on the balanced memory.
    pub fn bgs_retrain(&mut self) -> Result<()> {
        let memory = self
            .bgs_memory
            .as_ref()
            .ok_or_else(|| Error::Missing("bgs memory (bgs disabled)".into()))?;
        let mut order = self.seeds.rng_indexed(Purpose::BatchOrder, BGS_STREAM);
        bgs_retrain_heads(
            &mut self.model,
            memory,
            &self.layout.routing,
            &self.hyper,
            self.hyper.epochs,
            &mut order,
        )
    }
}

fn retrain_epochs(epochs: usize) -> usize {
    ((epochs as f64 * 0.2).ceil() as usize).max(1)
}

/// Trunk gates for PackNet: weights trainable where the mask equals
/// `trainable` (0 = free), biases only while learning the first task.
fn packnet_gates(model: &MlpModel, masks: &[Vec<u32>], task: usize, trainable: u32) -> Vec<Gate> {
    (0..model.tensor_count())
        .map(|i| {
            if !model.trunk_tensors().contains(&i) {
                Gate::Train
            } else if model.is_weight_tensor(i) {
                Gate::Masked(masks[i / 2].iter().map(|&m| m == trainable).collect())
            } else if task == 0 {
                Gate::Train
            } else {
                Gate::Frozen
            }
        })
        .collect()
}

/// Shuffled minibatch index lists covering `0..n` once.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Plain training loop: fresh AdamW, per-epoch cosine learning rate.
fn fit(
    model: &mut MlpModel,
    data: &[&BiasedSample],
    hyper: &HyperConfig,
    epochs: usize,
    order: &mut Rng,
    gates: &[Gate],
    objective: &dyn Objective,
) -> Result<()> {
    let mut state = AdamWState::new(model, hyper.optimizer);
    for epoch in 0..epochs {
        state.hyper.learning_rate = cosine_lr(epoch, epochs, hyper.optimizer.learning_rate)?;
        for idx in epoch_batches(data.len(), hyper.batch_size, order) {
            let samples: Vec<&BiasedSample> = idx.iter().map(|&i| data[i]).collect();
            train_step(model, &mut state, &to_batch(&samples)?, objective, gates)?;
        }
    }
    Ok(())
}

/// Updates `q` from the batch's per-cell losses and returns the sample weights.
#[allow(clippy::too_many_arguments)]
fn dro_weights(
    q: &mut Vec<f64>,
    eta: f64,
    model: &MlpModel,
    batch: &crate::nn::Batch,
    samples: &[&BiasedSample],
    n_weighted: usize,
    cell_of: impl Fn(&BiasedSample) -> Option<usize>,
    routing: &HeadRouting,
) -> Result<Vec<f64>> {
    let pass = RoutedPass::forward(model, batch, routing)?;
    let cells: Vec<Option<usize>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| if i < n_weighted { cell_of(s) } else { None })
        .collect();
    let mut sums = vec![(0.0, 0usize); q.len()];
    for (c, l) in cells.iter().zip(pass.losses()) {
        if let Some(c) = c {
            sums[*c].0 += l;
            sums[*c].1 += 1;
        }
    }
    let losses: Vec<Option<f64>> = sums
        .iter()
        .map(|&(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    *q = groupdro_reweight(q, &losses, eta)?;
    Ok(cell_weights(&cells, q, n_weighted))
}

/// Trains a fresh model on the memory contents only.
pub fn gdumb_train(
    memory: &ExemplarMemory,
    arch: &Architecture,
    hyper: &HyperConfig,
    seed: u64,
) -> Result<MlpModel> {
    if memory.is_empty() {
        return Err(Error::Empty("gdumb memory".into()));
    }
    let seeds = SeedStreams::new(seed);
    let mut model = arch.build(&mut seeds.rng_indexed(Purpose::Init, GDUMB_STREAM))?;
    let data: Vec<&BiasedSample> = memory.samples().collect();
    let objective = MethodObjective::cross_entropy(&arch.routing, true);
    let mut order = seeds.rng_indexed(Purpose::BatchOrder, GDUMB_STREAM);
    fit(&mut model, &data, hyper, hyper.epochs, &mut order, &[], &objective)?;
    Ok(model)
}

/// Re-optimizes every head from its current value on the memory; the trunk
/// receives no gradient and stays bit-identical.
pub fn bgs_retrain_heads(
    model: &mut MlpModel,
    memory: &ExemplarMemory,
    routing: &HeadRouting,
    hyper: &HyperConfig,
    epochs: usize,
    order: &mut Rng,
) -> Result<()> {
    if memory.is_empty() {
        return Err(Error::Empty("bgs memory".into()));
    }
    let data: Vec<&BiasedSample> = memory.samples().collect();
    let objective = MethodObjective::cross_entropy(routing, false);
    fit(model, &data, hyper, epochs, order, &[], &objective)
}

#[cfg(test)]
mod tests;
