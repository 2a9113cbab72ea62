use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{run_experiment, RunReport, RunStatus};
use crate::error::{Error, Result};
use crate::nn::ActivationKind;

/// One line of a learning-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub status: String,
    pub diverged_at: Option<usize>,
    pub validation_metric: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: RunReport,
    pub reports: Vec<RunReport>,
    pub table: Vec<SweepRow>,
}

fn lr_dir_name(lr: f64) -> String {
    format!("lr_{lr:e}")
}

/// Runs `cfgs` on up to `available_parallelism` threads; results keep the
/// input order.
fn run_all(cfgs: &[ExperimentConfig]) -> Vec<Result<RunReport>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    if workers == 1 || cfgs.len() == 1 {
        return cfgs.iter().map(run_experiment).collect();
    }
    let mut out = Vec::with_capacity(cfgs.len());
    for chunk in cfgs.chunks(workers) {
        let results: Vec<Result<RunReport>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(move || run_experiment(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        out.extend(results);
    }
    out
}

/// Index of the best finite metric; ties go to the lower learning rate.
fn select_best(reports: &[RunReport]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in reports.iter().enumerate() {
        let Some(m) = r.validation_metric.filter(|m| m.is_finite()) else {
            continue;
        };
        if r.status.diverged() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let mj = reports[j].validation_metric.expect("selected runs have a metric");
                if m > mj || (m == mj && r.lr < reports[j].lr) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    best
}

/// Trains `cfg` once per learning rate and keeps the run with the highest
/// held-out metric. With `cfg.output_dir` set, each run writes into
/// `<output_dir>/lr_<lr>` and the table goes to `<output_dir>/sweep.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, lrs: &[f64]) -> Result<SweepResult> {
    if lrs.is_empty() {
        return Err(Error::InvalidConfig("learning-rate list is empty".into()));
    }
    let cfgs: Vec<ExperimentConfig> = lrs
        .iter()
        .map(|&lr| {
            let mut c = cfg.clone();
            c.lr = lr;
            if lrs.len() > 1 {
                c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(lr_dir_name(lr)));
            }
            c
        })
        .collect();
    let reports = run_all(&cfgs).into_iter().collect::<Result<Vec<_>>>()?;
    let best = select_best(&reports).ok_or(Error::AllDiverged)?;
    let table: Vec<SweepRow> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| SweepRow {
            lr: r.lr,
            status: match &r.status {
                RunStatus::Completed => "completed".into(),
                RunStatus::Diverged { .. } => "diverged".into(),
            },
            diverged_at: match &r.status {
                RunStatus::Diverged { step, .. } => Some(*step),
                RunStatus::Completed => None,
            },
            validation_metric: r.validation_metric,
            selected: i == best,
        })
        .collect();
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_sweep_csv(&dir.join("sweep.csv"), &table)?;
    }
    Ok(SweepResult {
        best: reports[best].clone(),
        reports,
        table,
    })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Best-of-sweep result of one activation in a comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: String,
    pub activation: String,
    pub best_lr: f64,
    pub test_r2: Option<f64>,
    pub test_mse: Option<f64>,
    pub test_top1: Option<f64>,
    pub parameters: usize,
    pub diverged_lrs: usize,
}

/// The DiTAC-versus-baselines grid: DiTAC with `cfg`'s variant first, then
/// every baseline, each with its own learning-rate sweep. Writes
/// `<output_dir>/comparison.csv` when an output directory is set.
pub fn run_comparison(cfg: &ExperimentConfig, kinds: &[ActivationKind], lrs: &[f64]) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut c = cfg.clone();
        c.activation = kind;
        c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(kind.name()));
        let sweep = run_sweep(&c, lrs)?;
        let b = &sweep.best;
        rows.push(ComparisonRow {
            task: cfg.task.name().into(),
            activation: kind.name().into(),
            best_lr: b.lr,
            test_r2: b.metrics.test_r2,
            test_mse: b.metrics.test_mse,
            test_top1: b.metrics.test_top1,
            parameters: b.parameters.total,
            diverged_lrs: sweep.table.iter().filter(|r| r.diverged_at.is_some()).count(),
        });
    }
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_comparison_csv(&dir.join("comparison.csv"), &rows)?;
    }
    Ok(rows)
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// DiTAC (the config's variant, or the default one) followed by the eight
/// baselines.
pub fn comparison_kinds(cfg: &ExperimentConfig) -> Vec<ActivationKind> {
    let ditac = if cfg.activation.is_ditac() {
        cfg.activation
    } else {
        ActivationKind::Ditac(crate::activation::Variant::Ditac)
    };
    std::iter::once(ditac).chain(ActivationKind::BASELINES).collect()
}
