use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_scenario, run_single, run_single_limited, RunConfig, RunRecord};
use crate::error::{Error, Result};
use crate::metrics::normalize_fi;
use crate::trainers::HyperKnob;

/// `n` values spaced uniformly on a log scale over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Empty("a grid needs at least two points".into()));
    }
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::OutOfRange(format!("log grid over [{lo}, {hi}]")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Mean over tasks and seeds.
    pub avg_accuracy: f64,
    pub avg_bmr: Option<f64>,
    pub f_minus_i: f64,
    pub normalized_fi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: RunConfig,
    pub knob: HyperKnob,
    pub points: Vec<SweepPoint>,
    /// Grid-major, seeds inner.
    pub records: Vec<RunRecord>,
    /// Best-accuracy grid point per normalized F−I third (at most three).
    pub representatives: Vec<usize>,
    pub degenerate: bool,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn point(value: f64, records: &[RunRecord]) -> SweepPoint {
    SweepPoint {
        value,
        avg_accuracy: mean(records.iter().map(|r| r.metrics.avg_accuracy)).unwrap_or(f64::NAN),
        avg_bmr: mean(records.iter().filter_map(|r| r.metrics.avg_bmr)),
        f_minus_i: mean(records.iter().map(|r| r.metrics.f_minus_i)).unwrap_or(f64::NAN),
        normalized_fi: None,
    }
}

fn configured(base: &RunConfig, knob: HyperKnob, value: f64) -> Result<RunConfig> {
    let mut c = base.clone();
    knob.set(&mut c.hyper, value);
    c.hyper.validate()?;
    c.hyper.check_search_range(c.method.id, c.method.groupdro)?;
    Ok(c)
}

/// Runs the grid × seeds for every expanded configuration of `base`.
pub fn sweep(base: &RunConfig, knob: HyperKnob, values: &[f64]) -> Result<Vec<SweepResult>> {
    if values.len() < 2 {
        return Err(Error::Empty("sweep grid needs at least two values".into()));
    }
    base.validate()?;
    let mut results = Vec::new();
    for concrete in base.expand() {
        let grid = values
            .iter()
            .map(|&v| configured(&concrete, knob, v))
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(usize, u64)> = (0..grid.len())
            .flat_map(|g| concrete.seeds.iter().map(move |&s| (g, s)))
            .collect();
        let mut records = jobs
            .par_iter()
            .map(|&(g, s)| run_single(&grid[g], s))
            .collect::<Result<Vec<_>>>()?;
        let per_point = concrete.seeds.len();
        let mut points: Vec<SweepPoint> = values
            .iter()
            .enumerate()
            .map(|(g, &v)| point(v, &records[g * per_point..(g + 1) * per_point]))
            .collect();
        let fi: Vec<f64> = points.iter().map(|p| p.f_minus_i).collect();
        let (normalized, degenerate) = normalize_fi(&fi)?;
        for (g, (p, n)) in points.iter_mut().zip(&normalized).enumerate() {
            p.normalized_fi = Some(*n);
            for r in &mut records[g * per_point..(g + 1) * per_point] {
                r.metrics.normalized_fi = Some(*n);
            }
        }
        if let Some(dir) = &base.output {
            for r in &records {
                super::save_record(r, dir)?;
            }
        }
        results.push(SweepResult {
            representatives: interval_representatives(&points),
            config: concrete,
            knob,
            points,
            records,
            degenerate,
        });
    }
    Ok(results)
}

/// Splits normalized F−I into three equal intervals and returns, for each
/// non-empty interval, the grid point with the highest average accuracy.
pub fn interval_representatives(points: &[SweepPoint]) -> Vec<usize> {
    let mut out = Vec::new();
    for third in 0..3 {
        let lo = third as f64 / 3.0;
        let hi = (third + 1) as f64 / 3.0;
        let best = points
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                p.normalized_fi
                    .is_some_and(|n| n >= lo && (n < hi || (third == 2 && n <= 1.0)))
            })
            .fold(None::<usize>, |best, (i, p)| match best {
                Some(b) if points[b].avg_accuracy >= p.avg_accuracy => Some(b),
                _ => Some(i),
            });
        out.extend(best);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub knob: HyperKnob,
    pub chosen: f64,
    /// Metrics over the first `tune_tasks` tasks per candidate.
    pub tuning: Vec<SweepPoint>,
    /// Full-length runs with the chosen value.
    pub records: Vec<RunRecord>,
}

/// Picks the value maximizing average accuracy over the first `tune_tasks`
/// tasks (ties: lower BMR), then runs the full stream with it.
pub fn tune_and_run(base: &RunConfig, knob: HyperKnob, values: &[f64], tune_tasks: usize) -> Result<TuneResult> {
    if values.is_empty() {
        return Err(Error::Empty("tuning grid".into()));
    }
    base.validate()?;
    let grid = values
        .iter()
        .map(|&v| configured(base, knob, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, RunConfig, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(g, c)| {
            c.expand()
                .into_iter()
                .flat_map(move |e| e.seeds.clone().into_iter().map(move |s| (g, e.clone(), s)))
        })
        .collect();
    let records = jobs
        .par_iter()
        .map(|(_, c, s)| run_single_limited(c, *s, Some(tune_tasks)))
        .collect::<Result<Vec<_>>>()?;
    let tuning: Vec<SweepPoint> = values
        .iter()
        .enumerate()
        .map(|(g, &v)| {
            let mine: Vec<RunRecord> = jobs
                .iter()
                .zip(&records)
                .filter(|((jg, _, _), _)| *jg == g)
                .map(|(_, r)| r.clone())
                .collect();
            point(v, &mine)
        })
        .collect();
    let best = (0..tuning.len())
        .reduce(|b, i| {
            let (pb, pi) = (&tuning[b], &tuning[i]);
            let bmr = |p: &SweepPoint| p.avg_bmr.unwrap_or(f64::INFINITY);
            if pi.avg_accuracy > pb.avg_accuracy
                || (pi.avg_accuracy == pb.avg_accuracy && bmr(pi) < bmr(pb))
            {
                i
            } else {
                b
            }
        })
        .expect("non-empty grid");
    let chosen = values[best];
    let records = run_scenario(&grid[best])?;
    Ok(TuneResult {
        knob,
        chosen,
        tuning,
        records,
    })
}
