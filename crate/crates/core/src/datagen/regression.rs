use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::dataset::{split_indices, LabeledDataset, Targets};
use super::seeded_rng;
use crate::error::{Error, Result};

/// `sin(exp(6x))`.
pub fn target_1d_a(x: f64) -> f64 {
    (6.0 * x).exp().sin()
}

pub fn target_1d_b(x: f64) -> f64 {
    0.4 * (19.0 * x).sin() + 0.2 * (23.0 * x).sin() + 0.3 * (29.0 * x).sin() + 0.1 * (31.0 * x).sin()
}

pub fn target_2d(x: f64, y: f64) -> f64 {
    0.4 * (9.0 * x * y).sin()
        + 0.1 * (-9.0 * x + 11.0 * y).sin()
        + 0.15 * (3.0 * x + 13.0 * y).sin()
        + 0.15 * (9.0 * x + 9.0 * y).sin()
        + 0.1 * (13.0 * x + 5.0 * y).sin()
        + 0.1 * (3.0 * x + 19.0 * y).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTarget {
    OneDA,
    OneDB,
    TwoD,
}

impl RegressionTarget {
    pub fn dim(self) -> usize {
        match self {
            RegressionTarget::TwoD => 2,
            _ => 1,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            RegressionTarget::OneDA => target_1d_a(x[0]),
            RegressionTarget::OneDB => target_1d_b(x[0]),
            RegressionTarget::TwoD => target_2d(x[0], x[1]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegressionTarget::OneDA => "one_d_a",
            RegressionTarget::OneDB => "one_d_b",
            RegressionTarget::TwoD => "two_d",
        }
    }
}

impl fmt::Display for RegressionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegressionTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_d_a" => Ok(RegressionTarget::OneDA),
            "one_d_b" => Ok(RegressionTarget::OneDB),
            "two_d" => Ok(RegressionTarget::TwoD),
            _ => Err(Error::InvalidConfig(format!("unknown regression target '{s}'"))),
        }
    }
}

/// `n` inputs drawn uniformly from the box `domain` (one `(lo, hi)` per
/// dimension, sampled coordinate by coordinate), exact targets, and a seeded
/// split with `round(train_frac * n)` training rows.
pub fn sample_regression_dataset(
    target: RegressionTarget,
    domain: &[(f64, f64)],
    n: usize,
    train_frac: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if domain.len() != target.dim() {
        return Err(Error::InvalidConfig(format!(
            "{target} takes {} inputs but the domain has {} intervals",
            target.dim(),
            domain.len()
        )));
    }
    let mut dists = Vec::with_capacity(domain.len());
    for &(lo, hi) in domain {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!("empty or invalid domain [{lo}, {hi}]")));
        }
        dists.push(Uniform::new(lo, hi).map_err(|e| Error::InvalidConfig(e.to_string()))?);
    }
    let mut rng = seeded_rng(seed);
    let p = domain.len();
    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut y = DMatrix::<f64>::zeros(n, 1);
    let mut point = vec![0.0; p];
    for i in 0..n {
        for (j, d) in dists.iter().enumerate() {
            point[j] = d.sample(&mut rng);
            x[(i, j)] = point[j];
        }
        y[(i, 0)] = target.eval(&point);
    }
    let (train, test) = split_indices(n, train_frac, &mut rng)?;
    LabeledDataset::new(x, Targets::Values(y), train, test)
}
