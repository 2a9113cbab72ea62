use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class indices.
    Labels(Vec<usize>),
    /// `n x k` real targets.
    Values(DMatrix<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => Targets::Values(v.select_rows(idx)),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&DMatrix<f64>> {
        match self {
            Targets::Labels(_) => None,
            Targets::Values(v) => Some(v),
        }
    }
}

/// Inputs, targets and a train/test partition of the row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: DMatrix<f64>,
    pub targets: Targets,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation of `0..n`; the first `round(train_frac * n)` indices
/// form the training split.
pub fn split_indices<R: Rng + ?Sized>(n: usize, train_frac: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction {train_frac} not in (0, 1)")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let n_train = (train_frac * n as f64).round() as usize;
    let test = perm.split_off(n_train);
    Ok((perm, test))
}

impl LabeledDataset {
    pub fn new(x: DMatrix<f64>, targets: Targets, train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let ds = Self { x, targets, train, test };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Checks that targets match inputs and that the split is a partition.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.targets.len() != n {
            return Err(Error::Data(format!("{n} inputs but {} targets", self.targets.len())));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("split index {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("split does not cover every row".into()));
        }
        Ok(())
    }

    /// Replaces the partition with a fresh seeded split.
    pub fn resplit<R: Rng + ?Sized>(&mut self, train_frac: f64, rng: &mut R) -> Result<()> {
        let (train, test) = split_indices(self.len(), train_frac, rng)?;
        self.train = train;
        self.test = test;
        Ok(())
    }

    /// Rows `idx` as a new dataset whose split puts everything in training.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: self.x.select_rows(idx),
            targets: self.targets.select(idx),
            train: (0..idx.len()).collect(),
            test: Vec::new(),
        }
    }

    pub fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, Targets) {
        (self.x.select_rows(idx), self.targets.select(idx))
    }

    pub fn train_part(&self) -> (DMatrix<f64>, Targets) {
        self.rows(&self.train)
    }

    pub fn test_part(&self) -> (DMatrix<f64>, Targets) {
        self.rows(&self.test)
    }

    /// Writes `x0..x{d-1}`, the target column(s) and a `split` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        match &self.targets {
            Targets::Labels(_) => header.push("label".into()),
            Targets::Values(v) if v.ncols() == 1 => header.push("y".into()),
            Targets::Values(v) => header.extend((0..v.ncols()).map(|j| format!("y{j}"))),
        }
        header.push("split".into());
        let csv_err = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(&header).map_err(csv_err)?;
        let mut split = vec![""; self.len()];
        for &i in &self.train {
            split[i] = "train";
        }
        for &i in &self.test {
            split[i] = "test";
        }
        for (i, s) in split.iter().enumerate() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            match &self.targets {
                Targets::Labels(l) => rec.push(l[i].to_string()),
                Targets::Values(v) => rec.extend(v.row(i).iter().map(|t| t.to_string())),
            }
            rec.push((*s).to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
