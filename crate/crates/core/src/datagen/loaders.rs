use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use nalgebra::DMatrix;

use super::dataset::{split_indices, LabeledDataset, Targets};
use super::seeded_rng;
use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a file, inflating it first when it carries the gzip magic.
fn read(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Finds `<stem>` or `<stem>.gz` in `dir`.
fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    [plain, gz].into_iter().find(|p| p.is_file()).ok_or_else(|| {
        Error::io(
            dir.join(stem),
            std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (plain or .gz)"),
        )
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(())
}

/// Loads `<prefix>-images-idx3-ubyte` and `<prefix>-labels-idx1-ubyte`
/// (optionally gzipped) from `dir`, e.g. with prefix `train` or `t10k`.
pub fn load_idx_dir(dir: &Path, prefix: &str) -> Result<LabeledDataset> {
    let images = find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    load_idx(&images, &labels)
}

/// Parses an IDX image file (plain or gzipped) and its label file. Pixels are
/// scaled to `[0, 1]` and each image is flattened row by row. Every sample
/// lands in the training split; use [`LabeledDataset::resplit`] or
/// [`LabeledDataset::subset`] to carve out what is needed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = read(images_path)?;
    let labels = read(labels_path)?;

    need(images_path, &images, 16)?;
    let magic = be_u32(&images, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(images_path, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(&images, 4) as usize;
    let rows = be_u32(&images, 8) as usize;
    let cols = be_u32(&images, 12) as usize;
    let dim = rows * cols;
    need(images_path, &images, n.saturating_mul(dim).saturating_add(16))?;

    need(labels_path, &labels, 8)?;
    let magic = be_u32(&labels, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(labels_path, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n_labels = be_u32(&labels, 4) as usize;
    if n_labels != n {
        return Err(Error::Data(format!("{n} images but {n_labels} labels")));
    }
    need(labels_path, &labels, 8 + n)?;

    let pixels = &images[16..16 + n * dim];
    let x = DMatrix::from_row_iterator(n, dim, pixels.iter().map(|&p| f64::from(p) / 255.0));
    let y: Vec<usize> = labels[8..8 + n].iter().map(|&l| usize::from(l)).collect();
    LabeledDataset::new(x, Targets::Labels(y), (0..n).collect(), Vec::new())
}

/// Horsepower and MPG pairs from Auto-MPG text; rows whose horsepower is `?`
/// are skipped. Returns `(horsepower, mpg)`.
pub fn parse_auto_mpg(text: &str, origin: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut hp = Vec::new();
    let mut mpg = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 8 {
            return Err(Error::format(
                origin,
                format!("line {}: expected at least 8 fields, found {}", lineno + 1, fields.len()),
            ));
        }
        if fields[3] == "?" {
            continue;
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(origin, format!("line {}: bad number '{}'", lineno + 1, fields[i])))
        };
        for i in [1, 2, 4, 5, 6, 7] {
            num(i)?;
        }
        mpg.push(num(0)?);
        hp.push(num(3)?);
    }
    Ok((hp, mpg))
}

/// Loads Auto-MPG for regressing MPG on horsepower. The split is drawn with
/// `seed` (70% train), and horsepower is standardized with the training
/// rows' mean and population standard deviation.
pub fn load_auto_mpg(csv_path: &Path, seed: u64) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let (hp, mpg) = parse_auto_mpg(&text, csv_path)?;
    let n = hp.len();
    if n == 0 {
        log::warn!("{}: no usable rows", csv_path.display());
        return LabeledDataset::new(
            DMatrix::zeros(0, 1),
            Targets::Values(DMatrix::zeros(0, 1)),
            Vec::new(),
            Vec::new(),
        );
    }
    let (train, test) = split_indices(n, 0.7, &mut seeded_rng(seed))?;
    let basis: &[usize] = if train.is_empty() { &test } else { &train };
    let mean = basis.iter().map(|&i| hp[i]).sum::<f64>() / basis.len() as f64;
    let var = basis.iter().map(|&i| (hp[i] - mean).powi(2)).sum::<f64>() / basis.len() as f64;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let x = DMatrix::from_iterator(n, 1, hp.iter().map(|h| (h - mean) / std));
    let y = DMatrix::from_column_slice(n, 1, &mpg);
    LabeledDataset::new(x, Targets::Values(y), train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"18.0   8   307.0      130.0      3504.      12.0   70  1	"chevrolet chevelle malibu"
15.0   8   350.0      165.0      3693.      11.5   70  1	"buick skylark 320"
25.0   4   98.00      ?          2046.      19.0   71  1	"ford pinto"
24.0   4   113.0      95.00      2372.      15.0   70  3	"toyota corona mark ii"
"#;

    #[test]
    fn parses_and_drops_missing() {
        let (hp, mpg) = parse_auto_mpg(SAMPLE, Path::new("x")).unwrap();
        assert_eq!(hp, vec![130.0, 165.0, 95.0]);
        assert_eq!(mpg, vec![18.0, 15.0, 24.0]);
    }

    #[test]
    fn malformed_rows_are_errors() {
        assert!(parse_auto_mpg("18.0 8 307.0\n", Path::new("x")).is_err());
        assert!(parse_auto_mpg("18.0 8 307.0 abc 3504. 12.0 70 1 \"a\"\n", Path::new("x")).is_err());
        assert!(parse_auto_mpg("18.0 8 ? 130 3504. 12.0 70 1 \"a\"\n", Path::new("x")).is_err());
    }
}
