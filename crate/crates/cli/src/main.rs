use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use biascl::runner::{
    load_records, log_grid, report, run_scenario, save_record, sweep, tune_and_run, write_report, RunConfig,
    RunRecord,
};
use biascl::stream::{make_scenario, write_records, Preset};
use biascl::trainers::{HyperKnob, Method};

#[derive(Parser)]
#[command(name = "biascl", version, about = "Continual learning under dataset bias")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task stream and write it as JSON lines.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over every seed; one record per run.
    Run {
        #[command(flatten)]
        common: Common,
        /// Directory for run records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a hyperparameter over a log grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Defaults to the method's own knob.
        #[arg(long, value_enum)]
        knob: Option<Knob>,
        /// Grid lower end; defaults to the method's search range.
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long, default_value_t = 5)]
        points: usize,
        /// Pick the value on the first N tasks, then run the full stream.
        #[arg(long)]
        tune_tasks: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run records into CSV tables.
    Report {
        /// Directory holding run records.
        records: PathBuf,
        /// Output directory for the CSV files.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    bgs: bool,
    #[arg(long)]
    groupdro: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Knob {
    Lambda,
    MemoryFraction,
    PruningRatio,
    GroupdroLr,
}

impl From<Knob> for HyperKnob {
    fn from(k: Knob) -> Self {
        match k {
            Knob::Lambda => HyperKnob::Lambda,
            Knob::MemoryFraction => HyperKnob::MemoryFraction,
            Knob::PruningRatio => HyperKnob::PruningRatio,
            Knob::GroupdroLr => HyperKnob::GroupdroLr,
        }
    }
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.preset {
            c.scenario.preset = p;
        }
        if let Some(m) = self.method {
            c.method.id = m;
        }
        c.method.bgs |= self.bgs;
        c.method.groupdro |= self.groupdro;
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen { common, out } => gen(&common, out.as_deref()),
        Command::Run { common, out } => {
            let mut config = common.config()?;
            if out.is_some() {
                config.output = out;
            }
            let records = run_scenario(&config)?;
            print_records(&records)
        }
        Command::Sweep {
            common,
            knob,
            lo,
            hi,
            points,
            tune_tasks,
            out,
        } => {
            let config = common.config()?;
            let range = config.method.id.search_range();
            let knob = match (knob, range) {
                (Some(k), _) => HyperKnob::from(k),
                (None, Some((k, _, _))) => k,
                (None, None) => bail!("{} has no hyperparameter; pass --knob", config.method.id),
            };
            let (lo, hi) = match (lo, hi, range) {
                (Some(lo), Some(hi), _) => (lo, hi),
                (lo, hi, Some((k, a, b))) if k == knob => (lo.unwrap_or(a), hi.unwrap_or(b)),
                _ => bail!("no default range for {} with {}; pass --lo and --hi", knob.name(), config.method.id),
            };
            let grid = log_grid(lo, hi, points)?;
            let records = if let Some(t) = tune_tasks {
                let tuned = tune_and_run(&config, knob, &grid, t)?;
                log::info!("{} = {} chosen on the first {t} tasks", knob.name(), tuned.chosen);
                tuned.records
            } else {
                let results = sweep(&config, knob, &grid)?;
                for r in &results {
                    for (i, p) in r.points.iter().enumerate() {
                        let mark = if r.representatives.contains(&i) { "*" } else { " " };
                        println!(
                            "{mark} {}={:<10.4e} acc={:.4} bmr={} nfi={}",
                            knob.name(),
                            p.value,
                            p.avg_accuracy,
                            fmt_opt(p.avg_bmr),
                            fmt_opt(p.normalized_fi)
                        );
                    }
                }
                results.into_iter().flat_map(|r| r.records).collect()
            };
            if let Some(dir) = out {
                for r in &records {
                    save_record(r, &dir)?;
                }
            }
            Ok(())
        }
        Command::Report { records, out } => {
            let loaded = load_records(&records)?;
            let rep = report(&loaded)?;
            write_report(&rep, &out)?;
            log::info!("{} table rows written to {}", rep.table.len(), out.display());
            Ok(())
        }
    }
}

fn gen(common: &Common, out: Option<&Path>) -> Result<()> {
    let config = common.config()?;
    let seed = config.seeds.first().copied().unwrap_or(0);
    let stream = make_scenario(&config.scenario, seed)?;
    match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            write_records(&stream, &mut w)?;
            w.flush()?;
        }
        None => write_records(&stream, std::io::stdout().lock())?,
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_records(records: &[RunRecord]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    for r in records {
        let line = serde_json::json!({
            "method": r.config.method.id,
            "variant": r.config.method.variant(),
            "seed": r.seed,
            "bias_level": r.summary.bias_level,
            "avg_accuracy": r.metrics.avg_accuracy,
            "avg_bmr": r.metrics.avg_bmr,
            "target_bmr": r.summary.bmr,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}
