//! Gaussian smoothness prior over CPA velocity fields and the quadratic
//! regularizer it induces on `theta`.
//!
//! The prior is placed on the velocities at a fixed set of evaluation
//! points: the cell centers, plus both endpoints of the domain when the basis
//! has free boundaries (otherwise the center map would have a null space).
//! With `C` the linear map from `theta` to those velocities and `K` a
//! squared-exponential covariance over the points, the precision pulled back
//! to parameter space is `C^T K^{-1} C`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tessellation::CpaBasis;

/// Relative diagonal jitter added to the covariance before inversion.
pub const JITTER: f64 = 1e-8;

pub const DEFAULT_LAMBDA_VAR: f64 = 1.0;
pub const DEFAULT_W_REG: f64 = 1e-4;

/// Default correlation length: one cell width.
pub fn default_lambda_smooth(basis: &CpaBasis) -> f64 {
    basis.tessellation().cell_width()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessPrior {
    lambda_var: f64,
    lambda_smooth: f64,
    precision: DMatrix<f64>,
}

/// Points at which the prior constrains the velocity field.
pub fn evaluation_points(basis: &CpaBasis) -> Vec<f64> {
    let tess = basis.tessellation();
    let mut points = tess.cell_centers();
    if !basis.zero_boundary() {
        points.insert(0, tess.a());
        points.push(tess.b());
    }
    points
}

/// Matrix mapping `theta` to the velocities at [`evaluation_points`].
pub fn evaluation_map(basis: &CpaBasis) -> DMatrix<f64> {
    let points = evaluation_points(basis);
    let tess = basis.tessellation();
    let d = basis.dim();
    DMatrix::from_fn(points.len(), d, |i, j| {
        let x = points[i];
        let (slope, intercept) = basis.column_coefficients(j, tess.cell_index(x));
        slope * x + intercept
    })
}

/// Squared-exponential covariance over the evaluation points, without jitter.
pub fn kernel_matrix(points: &[f64], lambda_var: f64, lambda_smooth: f64) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| {
        let r = points[i] - points[j];
        lambda_var * (-(r * r) / (2.0 * lambda_smooth * lambda_smooth)).exp()
    })
}

impl SmoothnessPrior {
    pub fn new(basis: &CpaBasis, lambda_var: f64, lambda_smooth: f64) -> Result<Self> {
        for (name, v) in [("lambda_var", lambda_var), ("lambda_smooth", lambda_smooth)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidHyperparameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        let points = evaluation_points(basis);
        let c = evaluation_map(basis);
        let mut k = kernel_matrix(&points, lambda_var, lambda_smooth);
        for i in 0..k.nrows() {
            k[(i, i)] += JITTER * lambda_var;
        }
        let chol = k.cholesky().ok_or_else(|| {
            Error::InvalidHyperparameter(format!(
                "smoothness kernel is singular for lambda_smooth={lambda_smooth}"
            ))
        })?;
        let k_inv_c = chol.solve(&c);
        let mut precision = c.transpose() * k_inv_c;
        // symmetrize away round-off
        let pt = precision.transpose();
        precision = (precision + pt) * 0.5;
        Ok(Self {
            lambda_var,
            lambda_smooth,
            precision,
        })
    }

    /// Prior with the default hyperparameters for `basis`.
    pub fn with_defaults(basis: &CpaBasis) -> Result<Self> {
        Self::new(basis, DEFAULT_LAMBDA_VAR, default_lambda_smooth(basis))
    }

    /// Wraps an explicit precision matrix.
    pub fn from_precision(precision: DMatrix<f64>) -> Result<Self> {
        if !precision.is_square() {
            return Err(Error::Shape("precision must be square".into()));
        }
        Ok(Self {
            lambda_var: f64::NAN,
            lambda_smooth: f64::NAN,
            precision,
        })
    }

    pub fn lambda_var(&self) -> f64 {
        self.lambda_var
    }

    pub fn lambda_smooth(&self) -> f64 {
        self.lambda_smooth
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: theta.len(),
            });
        }
        Ok(())
    }

    /// `theta^T P theta` for a single parameter vector.
    pub fn quadratic(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        let t = DVector::from_column_slice(theta);
        Ok(t.dot(&(&self.precision * &t)))
    }

    /// Sum of the quadratic form over all activation layers.
    pub fn reg_loss<T: AsRef<[f64]>>(&self, thetas: &[T]) -> Result<f64> {
        thetas.iter().map(|t| self.quadratic(t.as_ref())).sum()
    }

    /// Gradient `2 P theta` of the quadratic form.
    pub fn reg_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        let t = DVector::from_column_slice(theta);
        Ok((&self.precision * t * 2.0).iter().copied().collect())
    }
}
