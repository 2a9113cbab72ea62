use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ditac(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ditac"))
        .args(args)
        .env("DITAC_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_dir_from(out: &str) -> PathBuf {
    let line = out.lines().find(|l| l.starts_with("run_dir")).expect("run_dir line");
    PathBuf::from(line.trim_start_matches("run_dir").trim())
}

const QUICK: [&str; 6] = [
    "--override",
    "iterations=80",
    "--override",
    "n_train=200",
    "--override",
    "n_test=50",
];

#[test]
fn train_eval_export_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--task", "reg2d", "--seed", "3"];
    args.extend(QUICK);
    let o = ditac(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("test_r2"));
    let run = run_dir_from(&out);
    assert!(run.starts_with(tmp.path()));
    assert!(run.join("report.json").is_file());

    let config = run.join("config.toml");
    let text = std::fs::read_to_string(&config).unwrap();
    assert!(text.contains("seed = 3") && text.contains("iterations = 80"));

    let replay = ditac(tmp.path(), &["train", "--config", config.to_str().unwrap()]);
    assert!(replay.status.success());
    let hash = |s: &str| s.lines().find(|l| l.starts_with("hash")).unwrap().to_string();
    assert_eq!(hash(&stdout(&replay)), hash(&out));

    let e = ditac(tmp.path(), &["eval", run.to_str().unwrap()]);
    assert!(e.status.success());
    assert!(stdout(&e).contains("\"test_r2\""));

    let luts = tmp.path().join("luts");
    let x = ditac(
        tmp.path(),
        &["export-lut", run.join("checkpoint").to_str().unwrap(), "--out", luts.to_str().unwrap()],
    );
    assert!(x.status.success(), "{}", String::from_utf8_lossy(&x.stderr));
    assert!(luts.join("lut_layer01.bin").is_file());
    assert!(stdout(&x).contains("probe max"));

    let csv = tmp.path().join("surface.csv");
    let p = ditac(
        tmp.path(),
        &[
            "plot-data",
            run.to_str().unwrap(),
            "--kind",
            "regression_surface",
            "--grid",
            "20",
            "--out",
            csv.to_str().unwrap(),
        ],
    );
    assert!(p.status.success());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 401);

    let bad = ditac(
        tmp.path(),
        &["plot-data", run.to_str().unwrap(), "--kind", "heatmap", "--out", csv.to_str().unwrap()],
    );
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown plot kind"));
}

#[test]
fn config_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ditac(tmp.path(), &["train"]);
    assert!(!o.status.success());
    let o = ditac(tmp.path(), &["train", "--task", "reg1d_a", "--override", "no_such_key=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = ditac(tmp.path(), &["train", "--task", "reg1d_a", "--override", "widths=[2,4,1]"]);
    assert!(!o.status.success());
}

#[test]
fn gen_gmm_and_selftest() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("gmm.csv");
    let o = ditac(tmp.path(), &["gen-gmm", "--out", csv.to_str().unwrap(), "--override", "gmm_points=100"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 101);

    let s = ditac(tmp.path(), &["selftest"]);
    assert!(s.status.success(), "{}", stdout(&s));
    assert_eq!(stdout(&s).lines().filter(|l| l.starts_with("PASS")).count(), 7);
}

#[test]
fn sweep_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--task", "reg1d_b", "--lrs", "1e-2,1e-3"];
    args.extend(QUICK);
    let o = ditac(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let table: Vec<&str> = out.lines().filter(|l| l.starts_with("lr ") && l.contains("completed")).collect();
    assert_eq!(table.len(), 2);
    assert_eq!(table.iter().filter(|l| l.ends_with(" *")).count(), 1);
    let dir = out.lines().find(|l| l.starts_with("output_dir")).unwrap();
    let dir = PathBuf::from(dir.trim_start_matches("output_dir").trim());
    assert!(dir.join("sweep.csv").is_file());
}
