use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{split_indices, LabeledDataset, Targets};
use super::seeded_rng;
use crate::error::{Error, Result};

/// Gaussian mixture with a normal-inverse-Wishart prior on each component
/// and Dirichlet mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub n_components: usize,
    pub mu0: Vec<f64>,
    pub kappa0: f64,
    pub nu0: f64,
    /// Row-major scale matrix of the inverse-Wishart.
    pub psi: Vec<Vec<f64>>,
    pub dirichlet_alpha: f64,
    pub n_points: usize,
    pub split: f64,
    pub seed: u64,
}

impl Default for GmmSpec {
    fn default() -> Self {
        Self {
            n_components: 10,
            mu0: vec![0.0, 0.0],
            kappa0: 0.05,
            nu0: 5.0,
            psi: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            dirichlet_alpha: 1.0,
            n_points: 5000,
            split: 0.7,
            seed: 0,
        }
    }
}

impl GmmSpec {
    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    fn psi_matrix(&self) -> Result<DMatrix<f64>> {
        let p = self.dim();
        if self.psi.len() != p || self.psi.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidConfig(format!("psi must be {p}x{p}")));
        }
        Ok(DMatrix::from_fn(p, p, |i, j| self.psi[i][j]))
    }

    fn validate(&self) -> Result<DMatrix<f64>> {
        let p = self.dim();
        if p == 0 || self.n_components == 0 {
            return Err(Error::InvalidConfig("GMM needs a positive dimension and component count".into()));
        }
        if !(self.kappa0 > 0.0 && self.kappa0.is_finite()) {
            return Err(Error::InvalidConfig(format!("kappa0 = {} must be positive", self.kappa0)));
        }
        if !(self.nu0 > p as f64 + 1.0 && self.nu0.is_finite()) {
            return Err(Error::InvalidConfig(format!("nu0 = {} must exceed dim + 1", self.nu0)));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidConfig("dirichlet_alpha must be positive".into()));
        }
        if self.mu0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mu0"));
        }
        let psi = self.psi_matrix()?;
        let symmetric = (0..p).all(|i| (0..p).all(|j| psi[(i, j)] == psi[(j, i)]));
        if !symmetric || psi.clone().cholesky().is_none() {
            return Err(Error::InvalidConfig("psi is not symmetric positive definite".into()));
        }
        Ok(psi)
    }
}

/// `Sigma ~ IW(nu, psi)` through a Bartlett draw of `Sigma^{-1} ~ W(nu, psi^{-1})`.
fn sample_inverse_wishart<R: Rng + ?Sized>(nu: f64, psi: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = psi.nrows();
    let scale = psi
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidConfig("psi is singular".into()))?;
    let l = scale
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("psi is not positive definite".into()))?
        .unpack();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(nu - i as f64).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = &l * a;
    let precision = &la * la.transpose();
    let sigma = precision
        .try_inverse()
        .ok_or_else(|| Error::Data("sampled a singular Wishart matrix".into()))?;
    Ok((&sigma + sigma.transpose()) * 0.5)
}

fn standard_normal_vector<R: Rng + ?Sized>(p: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(p, |_, _| StandardNormal.sample(rng))
}

/// Draws component parameters and weights, then `n_points` labelled points,
/// then the train/test split, all from one seeded stream in that order.
pub fn sample_gmm(spec: &GmmSpec) -> Result<LabeledDataset> {
    let psi = spec.validate()?;
    let p = spec.dim();
    let mut rng = seeded_rng(spec.seed);
    let mu0 = DVector::from_column_slice(&spec.mu0);

    let mut chols = Vec::with_capacity(spec.n_components);
    let mut means = Vec::with_capacity(spec.n_components);
    for _ in 0..spec.n_components {
        let sigma = sample_inverse_wishart(spec.nu0, &psi, &mut rng)?;
        let l = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Data("sampled covariance is not positive definite".into()))?
            .unpack();
        let mean = &mu0 + &l * standard_normal_vector(p, &mut rng) / spec.kappa0.sqrt();
        chols.push(l);
        means.push(mean);
    }

    let gamma = Gamma::new(spec.dirichlet_alpha, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let raw: Vec<f64> = (0..spec.n_components).map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|g| g / total).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Data(format!("mixture weights: {e}")))?;

    let mut x = DMatrix::<f64>::zeros(spec.n_points, p);
    let mut labels = Vec::with_capacity(spec.n_points);
    for i in 0..spec.n_points {
        let k = pick.sample(&mut rng);
        let point = &means[k] + &chols[k] * standard_normal_vector(p, &mut rng);
        x.row_mut(i).copy_from(&point.transpose());
        labels.push(k);
    }
    let (train, test) = split_indices(spec.n_points, spec.split, &mut rng)?;
    LabeledDataset::new(x, Targets::Labels(labels), train, test)
}

/// Component means drawn for `spec`, replaying the same stream
/// as [`sample_gmm`].
#[cfg(test)]
fn component_means(spec: &GmmSpec) -> Vec<DVector<f64>> {
    let psi = spec.validate().unwrap();
    let mut rng = seeded_rng(spec.seed);
    let mu0 = DVector::from_column_slice(&spec.mu0);
    (0..spec.n_components)
        .map(|_| {
            let sigma = sample_inverse_wishart(spec.nu0, &psi, &mut rng).unwrap();
            let l = sigma.cholesky().unwrap().unpack();
            &mu0 + &l * standard_normal_vector(spec.dim(), &mut rng) / spec.kappa0.sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_shape_and_determinism() {
        let spec = GmmSpec {
            seed: 42,
            ..GmmSpec::default()
        };
        let a = sample_gmm(&spec).unwrap();
        let b = sample_gmm(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.len(), a.dim(), a.train.len(), a.test.len()), (5000, 2, 3500, 1500));
        assert!(a.targets.labels().unwrap().iter().all(|&l| l < 10));
        let c = sample_gmm(&GmmSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn large_alpha_gives_uniform_weights() {
        let spec = GmmSpec {
            dirichlet_alpha: 1e6,
            n_points: 100_000,
            seed: 7,
            ..GmmSpec::default()
        };
        let ds = sample_gmm(&spec).unwrap();
        let mut counts = [0usize; 10];
        for &l in ds.targets.labels().unwrap() {
            counts[l] += 1;
        }
        for c in counts {
            let share = c as f64 / 100_000.0;
            assert!((share - 0.1).abs() < 0.02 * 0.1 + 0.002, "share {share}");
        }
    }

    #[test]
    fn large_kappa_concentrates_means() {
        let spec = GmmSpec {
            kappa0: 1e9,
            mu0: vec![1.5, -0.5],
            seed: 9,
            ..GmmSpec::default()
        };
        for m in component_means(&spec) {
            assert!((m[0] - 1.5).abs() < 1e-3 && (m[1] + 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn inverse_wishart_mean() {
        // E[Sigma] = psi / (nu - p - 1)
        let psi = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let mut rng = seeded_rng(1);
        let n = 40_000;
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            acc += sample_inverse_wishart(8.0, &psi, &mut rng).unwrap();
        }
        let mean = acc / n as f64;
        let expected = &psi / 5.0;
        assert!((mean - expected).abs().max() < 3e-3);
    }

    #[test]
    fn rejects_invalid_specs() {
        let bad_psi = GmmSpec {
            psi: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            ..GmmSpec::default()
        };
        assert!(sample_gmm(&bad_psi).is_err());
        let asym = GmmSpec {
            psi: vec![vec![1.0, 0.1], vec![0.0, 1.0]],
            ..GmmSpec::default()
        };
        assert!(sample_gmm(&asym).is_err());
        assert!(sample_gmm(&GmmSpec { nu0: 3.0, ..GmmSpec::default() }).is_err());
        assert!(sample_gmm(&GmmSpec { split: 0.0, ..GmmSpec::default() }).is_err());
    }
}
