use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::save_checkpoint;
use super::config::{ExperimentConfig, Task};
use crate::datagen::{
    load_auto_mpg, load_idx_dir, sample_gmm, sample_regression_dataset, seeded_rng, GmmSpec, LabeledDataset,
    RegressionTarget, Targets,
};
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, cross_entropy_grad, cross_entropy_loss, mse_grad, mse_loss, r2_score, top1_accuracy, AdamState,
    MlpModel, ParameterCount,
};

pub const AUTO_MPG_ENV: &str = "DITAC_AUTO_MPG";
/// Used when neither `auto_mpg_path` nor the environment names a file.
pub const DEFAULT_AUTO_MPG_PATH: &str = "data/auto_mpg/auto-mpg.data";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Independent 64-bit seed for one named stream of a run.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn regression_target(task: Task) -> Option<RegressionTarget> {
    match task {
        Task::Reg1dA => Some(RegressionTarget::OneDA),
        Task::Reg1dB => Some(RegressionTarget::OneDB),
        Task::Reg2d => Some(RegressionTarget::TwoD),
        _ => None,
    }
}

pub fn gmm_spec(cfg: &ExperimentConfig) -> GmmSpec {
    GmmSpec {
        n_components: cfg.gmm_components,
        mu0: vec![0.0, 0.0],
        kappa0: cfg.gmm_kappa0,
        nu0: cfg.gmm_nu0,
        psi: vec![vec![cfg.gmm_psi_scale, 0.0], vec![0.0, cfg.gmm_psi_scale]],
        dirichlet_alpha: cfg.gmm_alpha,
        n_points: cfg.gmm_points,
        split: cfg.split,
        seed: cfg.data_seed,
    }
}

/// Builds the dataset of `cfg.task` from `cfg.data_seed`.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    match cfg.task {
        Task::Gmm2d => sample_gmm(&gmm_spec(cfg)),
        Task::Mnist => {
            let full = load_idx_dir(&cfg.mnist_dir, "train")?;
            let mut rng = seeded_rng(cfg.data_seed);
            let mut order: Vec<usize> = (0..full.len()).collect();
            order.shuffle(&mut rng);
            if cfg.mnist_subset > 0 {
                order.truncate(cfg.mnist_subset);
                order.sort_unstable();
            }
            let mut ds = full.subset(&order);
            ds.resplit(cfg.split, &mut rng)?;
            Ok(ds)
        }
        Task::AutoMpg => {
            let path = match &cfg.auto_mpg_path {
                Some(p) => p.clone(),
                None => std::env::var_os(AUTO_MPG_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_AUTO_MPG_PATH)),
            };
            load_auto_mpg(&path, cfg.data_seed)
        }
        task => {
            let target = regression_target(task).expect("remaining tasks are analytic regressions");
            let domain = vec![(cfg.data_lo, cfg.data_hi); target.dim()];
            let n = cfg.n_train + cfg.n_test;
            let frac = cfg.n_train as f64 / n as f64;
            sample_regression_dataset(target, &domain, n, frac, cfg.data_seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// A non-finite loss or activation appeared at optimizer step `step`
    /// (1-based); metrics are those of the last finite evaluation, if any.
    Diverged { step: usize, reason: String },
}

impl RunStatus {
    pub fn diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub train_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub train_r2: Option<f64>,
    pub test_r2: Option<f64>,
    pub train_top1: Option<f64>,
    pub test_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    /// Mean training objective (task loss plus regularizer) since the
    /// previous row.
    pub train_loss: f64,
    pub test_loss: f64,
    /// Test R^2 for regression, test top-1 for classification.
    pub test_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub activation: String,
    pub lr: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub steps_completed: usize,
    pub metrics: Metrics,
    /// `r2` or `top1`, measured on the held-out split.
    pub validation_metric_name: String,
    pub validation_metric: Option<f64>,
    pub parameters: ParameterCount,
    pub learned_theta: Vec<Vec<f64>>,
    pub history_path: String,
    pub history_sha256: String,
    pub wall_clock_secs: f64,
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// SHA-256 of this report's JSON with `wall_clock_secs = 0`, an empty
    /// `content_hash` and no `output_dir`.
    pub content_hash: String,
}

impl RunReport {
    pub fn compute_content_hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.wall_clock_secs = 0.0;
        canonical.content_hash = String::new();
        canonical.config.output_dir = None;
        let bytes = serde_json::to_vec(&canonical)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// What a finished training loop produced.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub report: RunReport,
    pub model: MlpModel,
    pub history: Vec<HistoryRow>,
    pub data: LabeledDataset,
}

struct Split {
    train_x: DMatrix<f64>,
    train_y: Targets,
    test_x: DMatrix<f64>,
    test_y: Targets,
}

fn task_loss(pred: &DMatrix<f64>, y: &Targets) -> Result<(f64, DMatrix<f64>)> {
    match y {
        Targets::Values(v) => Ok((mse_loss(pred, v)?, mse_grad(pred, v)?)),
        Targets::Labels(l) => Ok((cross_entropy_loss(pred, l)?, cross_entropy_grad(pred, l)?)),
    }
}

/// `(loss, metric)` on a split; `None` when undefined.
fn evaluate(model: &mut MlpModel, x: &DMatrix<f64>, y: &Targets) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    if x.nrows() == 0 {
        return Ok((None, None, None));
    }
    let pred = model.predict(x)?;
    match y {
        Targets::Values(v) => {
            let mse = mse_loss(&pred, v)?;
            let r2 = match r2_score(&pred, v) {
                Ok(r) => Some(r),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok((Some(mse), Some(mse), r2))
        }
        Targets::Labels(l) => Ok((Some(cross_entropy_loss(&pred, l)?), None, Some(top1_accuracy(&pred, l)?))),
    }
}

/// Final losses and metrics of `model` on both splits of `data`.
pub fn compute_metrics(model: &mut MlpModel, task: Task, data: &LabeledDataset) -> Result<Metrics> {
    let (train_x, train_y) = data.train_part();
    let (test_x, test_y) = data.test_part();
    let (train_loss, train_mse, train_metric) = evaluate(model, &train_x, &train_y)?;
    let (test_loss, test_mse, test_metric) = evaluate(model, &test_x, &test_y)?;
    let mut m = Metrics {
        train_loss,
        test_loss,
        train_mse,
        test_mse,
        ..Metrics::default()
    };
    if task.is_classification() {
        m.train_top1 = train_metric;
        m.test_top1 = test_metric;
    } else {
        m.train_r2 = train_metric;
        m.test_r2 = test_metric;
    }
    Ok(m)
}

/// Reloads the checkpoint of a run directory, regenerates its data and
/// recomputes the final metrics.
pub fn evaluate_checkpoint(dir: &Path) -> Result<Metrics> {
    let (cfg, mut model) = super::checkpoint::load_checkpoint(dir)?;
    let data = prepare_data(&cfg)?;
    compute_metrics(&mut model, cfg.task, &data)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFiniteActivation { .. } | Error::NonFinite(_))
}

fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["step", "epoch", "train_loss", "test_loss", "test_metric"])
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    let text = String::from_utf8(bytes).expect("csv output is utf-8");
    Ok(text)
}

/// Trains one model according to `cfg` and returns the model with its
/// report. Nothing is written to disk.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let start = Instant::now();
    let data = prepare_data(cfg)?;
    if data.train.is_empty() {
        return Err(Error::Data(format!("{} has no training rows", cfg.task)));
    }
    let (train_x, train_y) = data.train_part();
    let (test_x, test_y) = data.test_part();
    let split = Split {
        train_x,
        train_y,
        test_x,
        test_y,
    };

    let mut init_rng = seeded_rng(derive_seed(cfg.seed, "init"));
    let mut batch_rng = seeded_rng(derive_seed(cfg.seed, "batches"));
    let mut model = MlpModel::build(&cfg.widths, &cfg.activation_spec(), cfg.head(), &mut init_rng)?;
    model.set_w_reg(cfg.effective_w_reg())?;
    let mut adam = AdamState::new(cfg.lr)?.with_weight_decay(cfg.weight_decay)?;

    let n = split.train_x.nrows();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = if cfg.task.is_classification() {
        cfg.epochs * batches_per_epoch
    } else {
        cfg.iterations
    };
    let log_every = match cfg.log_every {
        0 if cfg.task.is_classification() => batches_per_epoch,
        0 => 1000,
        k => k,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut epoch = 0;
    let mut history = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_count = 0usize;
    let mut status = RunStatus::Completed;
    let mut steps_done = 0;

    for step in 1..=total_steps {
        if cursor >= n {
            order.shuffle(&mut batch_rng);
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let idx = &order[cursor..end];
        cursor = end;

        let xb = split.train_x.select_rows(idx);
        let yb = split.train_y.select(idx);
        let outcome = (|| -> Result<f64> {
            let pred = model.forward(&xb)?;
            let (loss, grad) = task_loss(&pred, &yb)?;
            let objective = loss + model.regularization()?;
            if !objective.is_finite() {
                return Err(Error::NonFinite("loss"));
            }
            let grads = model.backward(&grad)?;
            if grads.groups.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
            adam_step(&mut adam, &mut model, &grads)?;
            Ok(objective)
        })();
        match outcome {
            Ok(obj) => {
                loss_acc += obj;
                loss_count += 1;
                steps_done = step;
            }
            Err(e) if is_divergence(&e) => {
                status = RunStatus::Diverged {
                    step,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }

        if step % log_every == 0 || step == total_steps {
            let eval = evaluate(&mut model, &split.test_x, &split.test_y);
            let (test_loss, _, metric) = match eval {
                Ok(v) => v,
                Err(e) if is_divergence(&e) => {
                    status = RunStatus::Diverged {
                        step,
                        reason: e.to_string(),
                    };
                    break;
                }
                Err(e) => return Err(e),
            };
            history.push(HistoryRow {
                step,
                epoch,
                train_loss: loss_acc / loss_count.max(1) as f64,
                test_loss: test_loss.unwrap_or(f64::NAN),
                test_metric: metric.unwrap_or(f64::NAN),
            });
            loss_acc = 0.0;
            loss_count = 0;
        }
    }

    let metrics = if status.diverged() {
        Metrics::default()
    } else {
        compute_metrics(&mut model, cfg.task, &data)?
    };
    let (metric_name, metric) = if cfg.task.is_classification() {
        ("top1", metrics.test_top1)
    } else {
        ("r2", metrics.test_r2)
    };

    let history_text = write_history(Path::new(HISTORY_FILE), &history)?;
    let mut report = RunReport {
        task: cfg.task,
        activation: cfg.activation.name().to_string(),
        lr: cfg.lr,
        seed: cfg.seed,
        status,
        steps_completed: steps_done,
        metrics,
        validation_metric_name: metric_name.to_string(),
        validation_metric: metric,
        parameters: model.count_parameters(),
        learned_theta: model.ditac_configs().map(|(_, c)| c.theta().to_vec()).collect(),
        history_path: HISTORY_FILE.to_string(),
        history_sha256: hex::encode(Sha256::digest(history_text.as_bytes())),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        config_hash: cfg.content_hash()?,
        content_hash: String::new(),
    };
    report.content_hash = report.compute_content_hash()?;
    Ok(TrainedRun {
        report,
        model,
        history,
        data,
    })
}

/// Writes `config.toml`, `history.csv`, `report.json` and the checkpoint of
/// a finished run into `dir`.
pub fn write_run(dir: &Path, run: &TrainedRun) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cfg = run.report.config.clone();
    cfg.output_dir = Some(dir.to_path_buf());
    cfg.save(&dir.join(CONFIG_FILE))?;
    let hist_path = dir.join(HISTORY_FILE);
    let text = write_history(&hist_path, &run.history)?;
    std::fs::write(&hist_path, text).map_err(|e| Error::io(&hist_path, e))?;
    let report_path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&run.report)?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    save_checkpoint(&dir.join(CHECKPOINT_DIR), &run.report.config, &run.model)
}

/// Trains per `cfg`; when `cfg.output_dir` is set the run directory is
/// written as well. Divergence is reported in the status, not as an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let run = train(cfg)?;
    if let Some(dir) = &cfg.output_dir {
        write_run(dir, &run)?;
    }
    Ok(run.report)
}
