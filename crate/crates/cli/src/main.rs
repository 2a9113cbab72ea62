use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ditac::datagen::sample_gmm;
use ditac::harness::{
    comparison_kinds, emit_plot_data, evaluate_checkpoint, export_lut, gmm_spec, load_checkpoint, probe_lut_export,
    run_comparison, run_experiment, run_selftest, run_sweep, ExperimentConfig, PlotKind, RunReport, RunStatus, Task,
    DEFAULT_GRID,
};
use nalgebra::DMatrix;

/// Root directory for run outputs when a config sets no `output_dir`.
const OUTPUT_ROOT_ENV: &str = "DITAC_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "ditac", version, about = "Diffeomorphic activation toy experiments")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    /// Directory that receives run directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

/// Config resolution: task defaults, then `--config`, then `--seed`, then
/// each `--override` in order.
#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML config file; its `task` key selects the defaults it overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Task whose defaults to start from when no config file is given.
    #[arg(long, global = true)]
    task: Option<Task>,

    /// Model and batch-order seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `key=value` assignment applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the 2-D Gaussian-mixture dataset and write it as CSV.
    GenGmm {
        #[arg(long, default_value = "gmm2d.csv")]
        out: PathBuf,
    },
    /// Train one model and write its run directory.
    Train,
    /// Train once per learning rate and keep the best run.
    Sweep {
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',', required = true)]
        lrs: Vec<f64>,
        /// Sweep DiTAC and every baseline activation and write comparison.csv.
        #[arg(long)]
        compare: bool,
    },
    /// Recompute metrics from a run directory's checkpoint.
    Eval { run_dir: PathBuf },
    /// Write one frozen lookup table per DiTAC layer of a checkpoint.
    ExportLut {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit CSV samples of a trained model for plotting.
    PlotData {
        run_dir: PathBuf,
        /// learned_af_curve, decision_boundary_grid or regression_surface.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the quick property checks.
    Selftest,
}

fn resolve_config(args: &CommonArgs, fallback: Option<Task>) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, args.task.or(fallback)) {
        (Some(path), task) => {
            let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
            if let Some(t) = task {
                if t != cfg.task {
                    bail!("--task {t} conflicts with task {} in {}", cfg.task, path.display());
                }
            }
            cfg
        }
        (None, Some(task)) => ExperimentConfig::defaults(task),
        (None, None) => bail!("pass --config FILE or --task NAME"),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    for o in &args.overrides {
        cfg.apply_override(o).with_context(|| format!("override '{o}'"))?;
    }
    Ok(cfg)
}

fn default_run_dir(root: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let hash = cfg.content_hash()?;
    Ok(root.join(format!("{}-{}-s{}-{}", cfg.task, cfg.activation, cfg.seed, &hash[..10])))
}

fn print_report(r: &RunReport) {
    println!("task        {}", r.task);
    println!("activation  {}", r.activation);
    println!("lr          {:e}", r.lr);
    match &r.status {
        RunStatus::Completed => println!("status      completed ({} steps)", r.steps_completed),
        RunStatus::Diverged { step, reason } => println!("status      diverged at step {step}: {reason}"),
    }
    let m = &r.metrics;
    for (name, v) in [
        ("test_mse", m.test_mse),
        ("test_r2", m.test_r2),
        ("test_top1", m.test_top1),
        ("test_loss", m.test_loss),
    ] {
        if let Some(v) = v {
            println!("{name:<11} {v:.6}");
        }
    }
    println!(
        "parameters  {} (dense {}, activations {:?})",
        r.parameters.total, r.parameters.dense, r.parameters.per_activation
    );
    println!("wall_clock  {:.2}s", r.wall_clock_secs);
    println!("hash        {}", r.content_hash);
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenGmm { out } => {
            let mut cfg = resolve_config(&cli.common, Some(Task::Gmm2d))?;
            if let Some(seed) = cli.common.seed {
                cfg.data_seed = seed;
            }
            let data = sample_gmm(&gmm_spec(&cfg))?;
            data.write_csv(&out)?;
            println!("wrote {} points to {}", data.len(), out.display());
        }
        Command::Train => {
            let mut cfg = resolve_config(&cli.common, None)?;
            if cfg.output_dir.is_none() {
                cfg.output_dir = Some(default_run_dir(&cli.output_root, &cfg)?);
            }
            let report = run_experiment(&cfg)?;
            print_report(&report);
            println!("run_dir     {}", cfg.output_dir.as_ref().expect("set above").display());
        }
        Command::Sweep { lrs, compare } => {
            let mut cfg = resolve_config(&cli.common, None)?;
            if cfg.output_dir.is_none() {
                let tag = if compare { "compare" } else { "sweep" };
                let dir = default_run_dir(&cli.output_root, &cfg)?;
                let name = dir.file_name().expect("named dir").to_string_lossy().into_owned();
                cfg.output_dir = Some(cli.output_root.join(format!("{tag}-{name}")));
            }
            if compare {
                let rows = run_comparison(&cfg, &comparison_kinds(&cfg), &lrs)?;
                println!("activation,best_lr,test_r2,test_mse,test_top1,parameters");
                for r in rows {
                    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
                    println!(
                        "{},{:e},{},{},{},{}",
                        r.activation,
                        r.best_lr,
                        f(r.test_r2),
                        f(r.test_mse),
                        f(r.test_top1),
                        r.parameters
                    );
                }
            } else {
                let result = run_sweep(&cfg, &lrs)?;
                for row in &result.table {
                    let metric = row.validation_metric.map_or("-".into(), |m| format!("{m:.6}"));
                    let mark = if row.selected { " *" } else { "" };
                    println!("lr {:<10e} {:<10} {metric}{mark}", row.lr, row.status);
                }
                print_report(&result.best);
            }
            println!("output_dir  {}", cfg.output_dir.as_ref().expect("set above").display());
        }
        Command::Eval { run_dir } => {
            let metrics = evaluate_checkpoint(&run_dir)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::ExportLut { checkpoint, out } => {
            let files = export_lut(&checkpoint, &out)?;
            for f in &files {
                println!("{}", f.display());
            }
            let (_, model) = load_checkpoint(&checkpoint)?;
            let n = model.input_dim();
            let probe = DMatrix::from_fn(64, n, |i, j| -4.0 + 8.0 * ((i * n + j) as f64 / (64 * n) as f64));
            let diff = probe_lut_export(&model, &out, &probe)?;
            println!("probe max |table - model| = {diff:.3e}");
        }
        Command::PlotData {
            run_dir,
            kind,
            grid,
            out,
        } => {
            let kind: PlotKind = kind.parse()?;
            let (cfg, mut model) = load_checkpoint(&run_dir)?;
            let data = emit_plot_data(&mut model, &cfg, kind, grid)?;
            data.write_csv(&out)?;
            println!("wrote {} rows of {} to {}", data.rows.len(), kind, out.display());
        }
        Command::Selftest => {
            let mut ok = true;
            for c in run_selftest() {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
