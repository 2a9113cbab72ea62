use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Task};
use super::run::prepare_data;
use crate::datagen::RegressionTarget;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Head, Layer, MlpModel};

pub const DEFAULT_GRID: usize = 200;
pub const CURVE_POINTS: usize = 1201;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    LearnedAfCurve,
    DecisionBoundaryGrid,
    RegressionSurface,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [
        PlotKind::LearnedAfCurve,
        PlotKind::DecisionBoundaryGrid,
        PlotKind::RegressionSurface,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::LearnedAfCurve => "learned_af_curve",
            PlotKind::DecisionBoundaryGrid => "decision_boundary_grid",
            PlotKind::RegressionSurface => "regression_surface",
        }
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown plot kind '{s}'")))
    }
}

/// A dense table of samples, one row per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub kind: PlotKind,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlotData {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(&self.columns).map_err(|e| Error::format(path, e.to_string()))?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Row-major `n x n` grid over a rectangle: `x` varies fastest.
fn grid_2d(bounds: [(f64, f64); 2], n: usize) -> DMatrix<f64> {
    let xs = linspace(bounds[0].0, bounds[0].1, n);
    let ys = linspace(bounds[1].0, bounds[1].1, n);
    let mut m = DMatrix::zeros(n * n, 2);
    for (j, &y) in ys.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            m[(j * n + i, 0)] = x;
            m[(j * n + i, 1)] = y;
        }
    }
    m
}

/// Bounding box of the task's inputs, widened by 10% on each side.
fn data_bounds(cfg: &ExperimentConfig) -> Result<[(f64, f64); 2]> {
    let data = prepare_data(cfg)?;
    if data.dim() != 2 || data.is_empty() {
        return Err(Error::InvalidConfig(format!("{} does not have 2-D inputs", cfg.task)));
    }
    let mut out = [(0.0, 0.0); 2];
    for (j, b) in out.iter_mut().enumerate() {
        let col = data.x.column(j);
        let (lo, hi) = (col.min(), col.max());
        let pad = 0.1 * (hi - lo).max(1e-9);
        *b = (lo - pad, hi + pad);
    }
    Ok(out)
}

fn learned_curves(model: &MlpModel, cfg: &ExperimentConfig) -> Result<PlotData> {
    let width = cfg.ditac_b - cfg.ditac_a;
    let xs = linspace(cfg.ditac_a - 0.25 * width, cfg.ditac_b + 0.25 * width, CURVE_POINTS);
    let mut rows = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if let Layer::Activation(a) = layer {
            let mut ys = xs.clone();
            a.clone().forward_inplace(&mut ys)?;
            rows.extend(xs.iter().zip(&ys).map(|(&x, &y)| vec![i as f64, x, y]));
        }
    }
    Ok(PlotData {
        kind: PlotKind::LearnedAfCurve,
        columns: vec!["layer".into(), "x".into(), "value".into()],
        rows,
    })
}

fn decision_grid(model: &mut MlpModel, cfg: &ExperimentConfig, n: usize) -> Result<PlotData> {
    if model.head() != Head::Classification || model.input_dim() != 2 {
        return Err(Error::InvalidConfig(
            "decision_boundary_grid needs a classifier with 2 inputs".into(),
        ));
    }
    let grid = grid_2d(data_bounds(cfg)?, n);
    let labels = argmax_rows(&model.predict(&grid)?);
    let rows = (0..grid.nrows())
        .map(|r| vec![grid[(r, 0)], grid[(r, 1)], labels[r] as f64])
        .collect();
    Ok(PlotData {
        kind: PlotKind::DecisionBoundaryGrid,
        columns: vec!["x".into(), "y".into(), "label".into()],
        rows,
    })
}

fn analytic_target(task: Task) -> Option<RegressionTarget> {
    match task {
        Task::Reg1dA => Some(RegressionTarget::OneDA),
        Task::Reg1dB => Some(RegressionTarget::OneDB),
        Task::Reg2d => Some(RegressionTarget::TwoD),
        _ => None,
    }
}

fn regression_surface(model: &mut MlpModel, cfg: &ExperimentConfig, n: usize) -> Result<PlotData> {
    if model.head() != Head::Regression || model.output_dim() != 1 {
        return Err(Error::InvalidConfig("regression_surface needs a scalar regression model".into()));
    }
    let (inputs, mut columns) = match model.input_dim() {
        1 => {
            let (lo, hi) = if cfg.task == Task::AutoMpg {
                let data = prepare_data(cfg)?;
                let col = data.x.column(0);
                (col.min(), col.max())
            } else {
                (cfg.data_lo, cfg.data_hi)
            };
            let xs = linspace(lo, hi, n * n);
            (DMatrix::from_column_slice(xs.len(), 1, &xs), vec!["x".to_string()])
        }
        2 => (
            grid_2d([(cfg.data_lo, cfg.data_hi); 2], n),
            vec!["x".to_string(), "y".to_string()],
        ),
        d => return Err(Error::InvalidConfig(format!("regression_surface supports 1 or 2 inputs, not {d}"))),
    };
    let pred = model.predict(&inputs)?;
    let target = analytic_target(cfg.task);
    columns.push("prediction".into());
    if target.is_some() {
        columns.push("target".into());
        columns.push("residual".into());
    }
    let rows = (0..inputs.nrows())
        .map(|r| {
            let point: Vec<f64> = inputs.row(r).iter().copied().collect();
            let p = pred[(r, 0)];
            let mut row = point.clone();
            row.push(p);
            if let Some(t) = target {
                let y = t.eval(&point);
                row.push(y);
                row.push(p - y);
            }
            row
        })
        .collect();
    Ok(PlotData {
        kind: PlotKind::RegressionSurface,
        columns,
        rows,
    })
}

/// Samples the requested view of a trained model. `grid` is the number of
/// points per axis for 2-D grids; 1-D surfaces use `grid^2` points.
pub fn emit_plot_data(model: &mut MlpModel, cfg: &ExperimentConfig, kind: PlotKind, grid: usize) -> Result<PlotData> {
    if grid < 2 {
        return Err(Error::InvalidConfig("plot grid needs at least 2 points per axis".into()));
    }
    match kind {
        PlotKind::LearnedAfCurve => learned_curves(model, cfg),
        PlotKind::DecisionBoundaryGrid => decision_grid(model, cfg, grid),
        PlotKind::RegressionSurface => regression_surface(model, cfg, grid),
    }
}
