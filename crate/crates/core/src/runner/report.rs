use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::RunRecord;
use crate::error::{Error, Result};
use crate::stream::Preset;
use crate::trainers::Method;

/// Mean and sample standard deviation (`n − 1`); the deviation is 0 for a
/// single value. `None` when empty.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

fn split(values: &[f64]) -> (Option<f64>, Option<f64>) {
    match mean_std(values) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub method: String,
    pub variant: String,
    pub k: usize,
    pub avg_acc_mean: f64,
    pub avg_acc_std: f64,
    pub avg_bmr_mean: Option<f64>,
    pub avg_bmr_std: Option<f64>,
    #[serde(skip)]
    pub avg_dca_mean: Option<f64>,
    #[serde(skip)]
    pub avg_dca_std: Option<f64>,
    #[serde(skip)]
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct DcaRow<'a> {
    method: &'a str,
    variant: &'a str,
    k: usize,
    avg_dca_mean: Option<f64>,
    avg_dca_std: Option<f64>,
    runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub normalized_fi: f64,
    pub bmr: f64,
    pub method: String,
    pub bias_level: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaRow {
    pub method: String,
    pub variant: String,
    pub knob: String,
    pub knob_value: Option<f64>,
    pub bias_level: u8,
    pub cka_mean: f64,
    pub cka_std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccumulationRow {
    pub method: String,
    pub variant: String,
    pub biased_tasks: usize,
    pub bmr_mean: f64,
    pub bmr_std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: Vec<TableRow>,
    pub curves: Vec<CurveRow>,
    pub cka: Vec<CkaRow>,
    pub accumulation: Vec<AccumulationRow>,
}

fn knob_of(r: &RunRecord) -> (String, Option<f64>) {
    match r.config.method.id.search_range() {
        Some((k, _, _)) => (k.name().to_string(), Some(k.get(&r.config.hyper))),
        None => (String::new(), None),
    }
}

/// Aggregates records over seeds. Row order is fixed by (method, variant, k).
pub fn report(records: &[RunRecord]) -> Result<Report> {
    let first = records.first().ok_or_else(|| Error::Empty("no records to report".into()))?;
    let family = first.config.scenario.family();
    if let Some(r) = records.iter().find(|r| r.config.scenario.family() != family) {
        return Err(Error::Incompatible(format!(
            "records mix {family:?} and {:?} scenarios",
            r.config.scenario.family()
        )));
    }
    Ok(Report {
        table: table_rows(records),
        curves: curve_rows(records),
        cka: cka_rows(records),
        accumulation: accumulation_rows(records),
    })
}

fn table_rows(records: &[RunRecord]) -> Vec<TableRow> {
    let mut groups: BTreeMap<(Method, String, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.config.method.id, r.config.method.variant(), r.summary.memory_size))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, variant, k), rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.metrics.avg_accuracy).collect();
            let bmr: Vec<f64> = rs.iter().filter_map(|r| r.metrics.avg_bmr).collect();
            let dca: Vec<f64> = rs.iter().filter_map(|r| r.metrics.avg_dca).collect();
            let (acc_mean, acc_std) = mean_std(&acc).expect("non-empty group");
            let (avg_bmr_mean, avg_bmr_std) = split(&bmr);
            let (avg_dca_mean, avg_dca_std) = split(&dca);
            TableRow {
                method: method.name().to_string(),
                variant,
                k,
                avg_acc_mean: acc_mean,
                avg_acc_std: acc_std,
                avg_bmr_mean,
                avg_bmr_std,
                avg_dca_mean,
                avg_dca_std,
                runs: rs.len(),
            }
        })
        .collect()
}

/// One point per record that carries a normalized F−I and a target BMR.
pub fn curve_rows(records: &[RunRecord]) -> Vec<CurveRow> {
    records
        .iter()
        .filter_map(|r| {
            Some(CurveRow {
                normalized_fi: r.metrics.normalized_fi?,
                bmr: r.summary.bmr?,
                method: r.config.method.id.name().to_string(),
                bias_level: r.summary.bias_level,
            })
        })
        .collect()
}

pub fn cka_rows(records: &[RunRecord]) -> Vec<CkaRow> {
    type Key = (Method, String, String, Option<u64>, u8);
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for r in records {
        let Some(cka) = r.summary.cka else { continue };
        let (knob, value) = knob_of(r);
        groups
            .entry((
                r.config.method.id,
                r.config.method.variant(),
                knob,
                value.map(f64::to_bits),
                r.summary.bias_level,
            ))
            .or_default()
            .push(cka);
    }
    groups
        .into_iter()
        .map(|((method, variant, knob, value, bias_level), v)| {
            let (cka_mean, cka_std) = mean_std(&v).expect("non-empty group");
            CkaRow {
                method: method.name().to_string(),
                variant,
                knob,
                knob_value: value.map(f64::from_bits),
                bias_level,
                cka_mean,
                cka_std,
                runs: v.len(),
            }
        })
        .collect()
}

/// Target-task BMR against the number of biased tasks (accumulation presets).
pub fn accumulation_rows(records: &[RunRecord]) -> Vec<AccumulationRow> {
    let mut groups: BTreeMap<(Method, String, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.config.scenario.preset != Preset::AccumulationSameBias {
            continue;
        }
        let Some(bmr) = r.summary.bmr else { continue };
        groups
            .entry((r.config.method.id, r.config.method.variant(), r.config.scenario.biased_tasks))
            .or_default()
            .push(bmr);
    }
    groups
        .into_iter()
        .map(|((method, variant, biased_tasks), v)| {
            let (bmr_mean, bmr_std) = mean_std(&v).expect("non-empty group");
            AccumulationRow {
                method: method.name().to_string(),
                variant,
                biased_tasks,
                bmr_mean,
                bmr_std,
                runs: v.len(),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    if rows.is_empty() {
        w.write_record(header).map_err(csv_error)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes `table.csv`, `dca.csv`, `curves.csv`, `cka.csv` and `accumulation.csv`.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(
        &dir.join("table.csv"),
        &report.table,
        &["method", "variant", "k", "avg_acc_mean", "avg_acc_std", "avg_bmr_mean", "avg_bmr_std"],
    )?;
    let dca: Vec<DcaRow> = report
        .table
        .iter()
        .map(|r| DcaRow {
            method: &r.method,
            variant: &r.variant,
            k: r.k,
            avg_dca_mean: r.avg_dca_mean,
            avg_dca_std: r.avg_dca_std,
            runs: r.runs,
        })
        .collect();
    write_csv(
        &dir.join("dca.csv"),
        &dca,
        &["method", "variant", "k", "avg_dca_mean", "avg_dca_std", "runs"],
    )?;
    write_csv(
        &dir.join("curves.csv"),
        &report.curves,
        &["normalized_fi", "bmr", "method", "bias_level"],
    )?;
    write_csv(
        &dir.join("cka.csv"),
        &report.cka,
        &["method", "variant", "knob", "knob_value", "bias_level", "cka_mean", "cka_std", "runs"],
    )?;
    write_csv(
        &dir.join("accumulation.csv"),
        &report.accumulation,
        &["method", "variant", "biased_tasks", "bmr_mean", "bmr_std", "runs"],
    )?;
    Ok(())
}
