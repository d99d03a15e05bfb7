//! Experiment orchestration: run configs, paired fine-tuning references,
//! per-task evaluation, persistence, sweeps and report tables.

mod report;
mod sweep;

pub use report::{
    accumulation_rows, cka_rows, curve_rows, mean_std, report, write_report, AccumulationRow,
    CkaRow, CurveRow, Report, TableRow,
};
pub use sweep::{interval_representatives, log_grid, sweep, tune_and_run, SweepPoint, SweepResult, TuneResult};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, bmr, cka_bias_probe, dca, mean_defined, misclass_breakdown, AccuracyMatrix,
    ClassPartition, HeadPredictor, MetricBundle,
};
use crate::nn::{HeadRouting, MlpModel};
use crate::stream::{make_scenario, BiasedSample, Endpoint, Preset, Scenario, ScenarioConfig, TaskStream};
use crate::trainers::{HyperConfig, Method, TrainerOptions, TrainerState};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub id: Method,
    pub bgs: bool,
    pub groupdro: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            id: Method::FineTuning,
            bgs: false,
            groupdro: false,
        }
    }
}

impl MethodConfig {
    pub fn options(&self) -> TrainerOptions {
        TrainerOptions {
            bgs: self.bgs,
            groupdro: self.groupdro,
        }
    }

    /// `plain`, `+bgs`, `+groupdro` or `+bgs+groupdro`.
    pub fn variant(&self) -> String {
        let mut v = String::new();
        if self.bgs {
            v.push_str("+bgs");
        }
        if self.groupdro {
            v.push_str("+groupdro");
        }
        if v.is_empty() {
            v.push_str("plain");
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub dca: bool,
    pub cka: bool,
    /// Misclassification breakdown; defaults to on for Class-IL streams with a bias class.
    pub breakdown: Option<bool>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            dca: true,
            cka: true,
            breakdown: None,
        }
    }
}

/// Everything needed to run one experiment; the JSON config file has exactly
/// these top-level keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub method: MethodConfig,
    pub hyper: HyperConfig,
    pub metrics: MetricsConfig,
    pub seeds: Vec<u64>,
    /// Directory receiving one JSON record per run.
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            method: MethodConfig::default(),
            hyper: HyperConfig::default(),
            metrics: MetricsConfig::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            output: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(format!("parsing {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Empty("seed list".into()));
        }
        let family = self.scenario.family();
        if self.method.id == Method::PackNet && family != Scenario::TaskIl {
            return Err(Error::Incompatible("packnet runs only in task-il".into()));
        }
        if self.metrics.breakdown == Some(true)
            && (family != Scenario::ClassIl || self.scenario.bias_class_task.is_none())
        {
            return Err(Error::Incompatible(
                "misclassification breakdown needs class-il with a bias class".into(),
            ));
        }
        Ok(())
    }

    /// Concrete configurations: the two-task presets without an explicit
    /// level expand into T-level 0 and 6 variants.
    pub fn expand(&self) -> Vec<RunConfig> {
        let two_task = matches!(
            self.scenario.preset,
            Preset::TwoTaskForward | Preset::TwoTaskBackward
        );
        if two_task && self.scenario.bias_level.is_none() && self.scenario.levels.is_none() {
            [0u8, 6]
                .into_iter()
                .map(|level| {
                    let mut c = self.clone();
                    c.scenario.bias_level = Some(level);
                    c
                })
                .collect()
        } else {
            vec![self.clone()]
        }
    }
}

/// Accuracy and BMR per learned task after one stage of the naive-debias scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub accuracy: Vec<f64>,
    pub bmr: Vec<Option<f64>>,
}

/// Headline point of a run for curve files: BMR and CKA of the preset's
/// target task, keyed by the level of the task whose bias is varied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub target_task: Option<usize>,
    pub bmr: Option<f64>,
    pub cka: Option<f64>,
    pub bias_level: u8,
    pub memory_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub metrics: MetricBundle,
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageRecord>,
    pub wall_clock_secs: f64,
    pub version: String,
}

impl RunRecord {
    /// JSON of the deterministic part: accuracy matrix plus metric bundle.
    pub fn metrics_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Section<'a> {
            accuracy: &'a AccuracyMatrix,
            metrics: &'a MetricBundle,
            summary: &'a Summary,
            stages: &'a [StageRecord],
        }
        Ok(serde_json::to_string(&Section {
            accuracy: &self.accuracy,
            metrics: &self.metrics,
            summary: &self.summary,
            stages: &self.stages,
        })?)
    }

    pub fn file_name(&self) -> String {
        let knob = self
            .config
            .method
            .id
            .search_range()
            .map(|(k, _, _)| format!("_{}={:e}", k.name(), k.get(&self.config.hyper)))
            .unwrap_or_default();
        let level = self
            .config
            .scenario
            .bias_level
            .map(|l| format!("_level{l}"))
            .unwrap_or_default();
        format!(
            "{}_{}{}{}{}_seed{}.json",
            self.config.scenario.preset,
            self.config.method.id,
            self.config.method.variant().replace('+', "_"),
            knob,
            level,
            self.seed
        )
    }
}

fn pairs(stream: &TaskStream, task: usize, channel: usize) -> Vec<(&BiasedSample, &BiasedSample)> {
    stream.test[task]
        .iter()
        .map(|p| (&p.original, &p.flipped[channel]))
        .collect()
}

struct TaskEval {
    accuracy: f64,
    bmr: Option<f64>,
    dca: Option<f64>,
    cka: Option<f64>,
}

fn evaluate_task(
    model: &MlpModel,
    routing: &HeadRouting,
    stream: &TaskStream,
    task: usize,
    metrics: &MetricsConfig,
) -> Result<TaskEval> {
    let predictor = HeadPredictor { model, routing, task };
    let originals: Vec<&BiasedSample> = stream.test[task].iter().map(|p| &p.original).collect();
    let paired = pairs(stream, task, 0);
    Ok(TaskEval {
        accuracy: accuracy(&predictor, &originals)?,
        bmr: bmr(&predictor, &paired)?,
        dca: if metrics.dca {
            Some(dca(&predictor, &originals, stream.geometry.group_count)?)
        } else {
            None
        },
        cka: if metrics.cka {
            match cka_bias_probe(model, &paired) {
                Ok(v) => Some(v),
                Err(Error::ZeroVariance) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        },
    })
}

struct Rows {
    accuracy: AccuracyMatrix,
    bmr: Vec<Vec<Option<f64>>>,
    dca: Vec<Vec<Option<f64>>>,
    cka: Vec<Vec<Option<f64>>>,
}

impl Rows {
    fn new() -> Self {
        Self {
            accuracy: AccuracyMatrix::new(),
            bmr: Vec::new(),
            dca: Vec::new(),
            cka: Vec::new(),
        }
    }

    fn evaluate(
        &mut self,
        state: &TrainerState,
        stream: &TaskStream,
        learned: usize,
        metrics: &MetricsConfig,
    ) -> Result<()> {
        let (mut acc, mut b, mut d, mut c) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for j in 0..=learned {
            let model = state.eval_model(j)?;
            let e = evaluate_task(&model, state.routing(), stream, j, metrics)?;
            acc.push(e.accuracy);
            b.push(e.bmr);
            d.push(e.dca);
            c.push(e.cka);
        }
        if self.accuracy.task_count() > learned {
            // re-evaluation of the final row (after BGS)
            self.accuracy.rows.pop();
            self.bmr.pop();
            self.dca.pop();
            self.cka.pop();
        }
        self.accuracy.push_row(acc)?;
        self.bmr.push(b);
        self.dca.push(d);
        self.cka.push(c);
        Ok(())
    }
}

fn load_stream(config: &RunConfig, seed: u64) -> Result<TaskStream> {
    make_scenario(&config.scenario, seed)
}

/// Diagonal accuracies of plain fine-tuning on the same stream and seed.
fn reference_diagonal(config: &RunConfig, stream: &TaskStream, seed: u64) -> Result<Vec<f64>> {
    let mut state = TrainerState::new(
        Method::FineTuning,
        config.hyper.clone(),
        TrainerOptions::default(),
        stream,
        seed,
    )?;
    let mut diag = Vec::with_capacity(stream.task_count());
    for t in 0..stream.task_count() {
        state.train_task(t, &stream.train[t])?;
        let model = state.eval_model(t)?;
        let originals: Vec<&BiasedSample> = stream.test[t].iter().map(|p| &p.original).collect();
        let predictor = HeadPredictor {
            model: &model,
            routing: state.routing(),
            task: t,
        };
        diag.push(accuracy(&predictor, &originals)?);
    }
    Ok(diag)
}

fn stage_record(state: &TrainerState, stream: &TaskStream, learned: usize, stage: usize) -> Result<StageRecord> {
    let none = MetricsConfig {
        dca: false,
        cka: false,
        breakdown: Some(false),
    };
    let mut accuracy = Vec::new();
    let mut bmr = Vec::new();
    for j in 0..=learned {
        let model = state.eval_model(j)?;
        let e = evaluate_task(&model, state.routing(), stream, j, &none)?;
        accuracy.push(e.accuracy);
        bmr.push(e.bmr);
    }
    Ok(StageRecord { stage, accuracy, bmr })
}

/// Runs one concrete configuration with one seed.
pub fn run_single(config: &RunConfig, seed: u64) -> Result<RunRecord> {
    run_single_limited(config, seed, None)
}

/// As [`run_single`], keeping only the first `task_limit` tasks of the stream.
pub fn run_single_limited(config: &RunConfig, seed: u64, task_limit: Option<usize>) -> Result<RunRecord> {
    let started = Instant::now();
    config.validate()?;
    let mut stream = load_stream(config, seed)?;
    if let Some(limit) = task_limit {
        stream = stream.truncated(limit);
    }
    let tasks = stream.task_count();
    let breakdown_on = config
        .metrics
        .breakdown
        .unwrap_or(stream.scenario() == Scenario::ClassIl && stream.bias_class().is_some());
    if breakdown_on && (stream.scenario() != Scenario::ClassIl || stream.bias_class().is_none()) {
        return Err(Error::Incompatible("breakdown needs class-il with a bias class".into()));
    }

    let ctx = |e: Error| e.context(format!("{} / {} / seed {seed}", config.scenario.preset, config.method.id));
    let mut state = TrainerState::new(
        config.method.id,
        config.hyper.clone(),
        config.method.options(),
        &stream,
        seed,
    )
    .map_err(ctx)?;
    let mut rows = Rows::new();
    let mut stages = Vec::new();
    for t in 0..tasks {
        state.train_task(t, &stream.train[t]).map_err(ctx)?;
        rows.evaluate(&state, &stream, t, &config.metrics).map_err(ctx)?;
        if config.scenario.preset == Preset::NaiveDebias3Stage {
            stages.push(stage_record(&state, &stream, t, t + 1)?);
        }
    }
    if config.scenario.preset == Preset::NaiveDebias3Stage && tasks >= 2 {
        state.groupdro_retrain(tasks - 1, &stream.train[tasks - 1]).map_err(ctx)?;
        stages.push(stage_record(&state, &stream, tasks - 1, tasks + 1)?);
    }
    if config.method.bgs {
        state.bgs_retrain().map_err(ctx)?;
        rows.evaluate(&state, &stream, tasks - 1, &config.metrics).map_err(ctx)?;
    }
    rows.accuracy.reference_diagonal = Some(reference_diagonal(config, &stream, seed).map_err(ctx)?);

    let metrics = bundle(&rows, &state, &stream, breakdown_on)?;
    let summary = summarize(config, &stream, &metrics, &state);
    Ok(RunRecord {
        config: config.clone(),
        seed,
        accuracy: rows.accuracy,
        metrics,
        summary,
        stages,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn bundle(rows: &Rows, state: &TrainerState, stream: &TaskStream, breakdown_on: bool) -> Result<MetricBundle> {
    let a = &rows.accuracy;
    let tasks = a.task_count();
    let forgetting = (2..=tasks).map(|t| a.forgetting(t)).collect::<Result<Vec<_>>>()?;
    let intransigence = (1..=tasks).map(|t| a.intransigence(t)).collect::<Result<Vec<_>>>()?;
    let f_final = forgetting.last().copied().unwrap_or(0.0);
    let i_final = *intransigence.last().expect("at least one task");
    let last = tasks - 1;

    let mut breakdown = Vec::new();
    if breakdown_on {
        let all: BTreeSet<usize> = stream.classes_seen(last).into_iter().collect();
        let bias_class = stream.bias_class();
        let newest: BTreeSet<usize> = stream.specs[last]
            .classes
            .iter()
            .copied()
            .filter(|c| Some(*c) != bias_class)
            .collect();
        let old: BTreeSet<usize> = all
            .iter()
            .copied()
            .filter(|c| !newest.contains(c) && Some(*c) != bias_class)
            .collect();
        let partition = ClassPartition {
            old,
            new: newest,
            bias_class,
        };
        for j in 0..tasks {
            let model = state.eval_model(j)?;
            let predictor = HeadPredictor {
                model: &model,
                routing: state.routing(),
                task: j,
            };
            breakdown.push(misclass_breakdown(&predictor, &pairs(stream, j, 0), &partition, &all)?);
        }
    }

    let mut channel_bmr = Vec::new();
    for channel in 1..stream.geometry.channel_count() {
        let mut per_task = Vec::new();
        for j in 0..tasks {
            let model = state.eval_model(j)?;
            let predictor = HeadPredictor {
                model: &model,
                routing: state.routing(),
                task: j,
            };
            per_task.push(bmr(&predictor, &pairs(stream, j, channel))?);
        }
        channel_bmr.push(per_task);
    }

    Ok(MetricBundle {
        avg_accuracy: a.average_accuracy(tasks)?,
        forgetting,
        intransigence,
        f_minus_i: f_final - i_final,
        normalized_fi: None,
        avg_bmr: mean_defined(&rows.bmr[last]),
        avg_dca: mean_defined(&rows.dca[last]),
        bmr: rows.bmr.clone(),
        dca: rows.dca.clone(),
        cka: rows.cka.clone(),
        breakdown,
        channel_bmr,
    })
}

/// Target task and varied bias level of each preset.
fn summarize(config: &RunConfig, stream: &TaskStream, metrics: &MetricBundle, state: &TrainerState) -> Summary {
    let levels = stream.bias_levels();
    let last = levels.len() - 1;
    let (target, level) = match config.scenario.preset {
        Preset::TwoTaskForward | Preset::AccumulationTwoAttributes => (Some(last), levels[0]),
        Preset::TwoTaskBackward | Preset::NaiveDebias3Stage => (Some(0), levels[last]),
        Preset::TenTaskEndpoints => match config.scenario.endpoint {
            Endpoint::First => (Some(last), levels[0]),
            Endpoint::Last => (Some(0), levels[last]),
        },
        Preset::AccumulationSameBias => (
            Some(last),
            levels[..last].iter().filter(|&&l| l > 0).count() as u8,
        ),
        Preset::RandomLevels => (None, levels.iter().copied().max().unwrap_or(0)),
    };
    let final_row = metrics.bmr.len() - 1;
    let (bmr, cka) = match target {
        Some(t) => (metrics.bmr[final_row][t], metrics.cka[final_row][t]),
        None => (metrics.avg_bmr, mean_defined(&metrics.cka[final_row])),
    };
    let memory_size = state
        .bgs_memory
        .as_ref()
        .or(state.replay_memory())
        .map_or(0, |m| m.capacity());
    Summary {
        target_task: target,
        bmr,
        cka,
        bias_level: level,
        memory_size,
    }
}

/// Runs every expanded configuration with every seed, in parallel.
/// Records come back in (configuration, seed) order.
pub fn run_scenario(config: &RunConfig) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let jobs: Vec<(RunConfig, u64)> = config
        .expand()
        .into_iter()
        .flat_map(|c| config.seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|(c, s)| run_single(c, *s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &config.output {
        for r in &records {
            save_record(r, dir)?;
        }
    }
    Ok(records)
}

pub fn save_record(record: &RunRecord, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(record.file_name());
    fs::write(&path, serde_json::to_string_pretty(record)?)?;
    Ok(path)
}

/// Loads every `*.json` record in `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::from(e).context(format!("record {}", p.display())))
        })
        .collect()
}
