//! File loaders against byte-level fixtures and the bundled datasets.

use std::io::Write;
use std::path::{Path, PathBuf};

use ditac::datagen::{load_auto_mpg, load_idx, load_idx_dir, sample_gmm, GmmSpec, Targets};
use ditac::Error;
use flate2::write::GzEncoder;
use flate2::Compression;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for v in [n, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

#[test]
fn idx_fixture_plain_and_gzipped() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
    let images = idx_images(3, 2, 2, &pixels);
    let labels = idx_labels(&[7, 0, 9]);
    std::fs::write(dir.path().join("train-images-idx3-ubyte"), &images).unwrap();
    std::fs::write(dir.path().join("train-labels-idx1-ubyte.gz"), gzip(&labels)).unwrap();

    let ds = load_idx_dir(dir.path(), "train").unwrap();
    assert_eq!((ds.len(), ds.dim()), (3, 4));
    assert_eq!(ds.targets.labels().unwrap(), &[7, 0, 9]);
    assert_eq!(ds.x[(1, 2)], 120.0 / 255.0);
    assert_eq!(ds.x[(2, 3)], 220.0 / 255.0);
    assert_eq!(ds.train, vec![0, 1, 2]);
    assert!(ds.test.is_empty());
}

#[test]
fn truncated_and_malformed_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img");
    let lab = dir.path().join("lab");
    std::fs::write(&lab, idx_labels(&[1, 2])).unwrap();

    std::fs::write(&img, idx_images(2, 2, 2, &[0; 5])).unwrap();
    let err = load_idx(&img, &lab).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("truncated: expected 24 bytes, found 21"), "{err}");

    std::fs::write(&img, &[0u8; 7]).unwrap();
    assert!(load_idx(&img, &lab).unwrap_err().to_string().contains("truncated"));

    let mut bad = idx_images(2, 2, 2, &[0; 8]);
    bad[3] = 0x01;
    std::fs::write(&img, bad).unwrap();
    assert!(load_idx(&img, &lab).unwrap_err().to_string().contains("bad magic"));

    std::fs::write(&img, idx_images(3, 2, 2, &[0; 12])).unwrap();
    assert!(matches!(load_idx(&img, &lab), Err(Error::Data(_))));

    assert!(matches!(load_idx_dir(dir.path(), "t10k"), Err(Error::Io { .. })));
}

#[test]
fn bundled_mnist_subset() {
    let ds = load_idx_dir(&data_dir().join("mnist5k"), "train").unwrap();
    assert_eq!((ds.len(), ds.dim()), (5000, 784));
    let mut counts = [0usize; 10];
    for &l in ds.targets.labels().unwrap() {
        counts[l] += 1;
    }
    assert_eq!(counts, [500; 10]);
    assert!(ds.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(ds.x.iter().any(|&v| v == 1.0));
}

#[test]
fn bundled_auto_mpg() {
    let path = data_dir().join("auto_mpg/auto-mpg.data");
    let ds = load_auto_mpg(&path, 0).unwrap();
    assert_eq!(ds.len(), 392);
    assert_eq!(ds.train.len(), 274);
    let train_x: Vec<f64> = ds.train.iter().map(|&i| ds.x[(i, 0)]).collect();
    let mean = train_x.iter().sum::<f64>() / train_x.len() as f64;
    let var = train_x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / train_x.len() as f64;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    match &ds.targets {
        Targets::Values(y) => assert_eq!(y[(0, 0)], 18.0),
        Targets::Labels(_) => panic!("auto-mpg targets are real-valued"),
    }
    assert_eq!(load_auto_mpg(&path, 0).unwrap(), ds);
    assert_ne!(load_auto_mpg(&path, 1).unwrap().train, ds.train);
}

#[test]
fn gmm_csv_export() {
    let spec = GmmSpec {
        n_points: 50,
        ..GmmSpec::default()
    };
    let ds = sample_gmm(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gmm.csv");
    ds.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x0,x1,label,split");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 50);
    let train_rows = rows.iter().filter(|r| r.ends_with(",train")).count();
    assert_eq!(train_rows, 35);
}
