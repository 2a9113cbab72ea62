//! Uniform partitions of an interval and the space of continuous
//! piecewise-affine (CPA) velocity fields on them.
//!
//! A CPA field on `n` cells is stored as `2n` stacked coefficients
//! `[a_0, b_0, a_1, b_1, ...]` where `v(x) = a_c * x + b_c` on cell `c`.
//! Continuity at the interior knots (and optionally `v(a) = v(b) = 0`) cuts
//! this down to a `d`-dimensional subspace; [`CpaBasis`] holds an orthonormal
//! basis of it so that a parameter vector `theta` maps to coefficients by a
//! single matrix product.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform partition of `[a, b]` into `n_cells` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tessellation {
    a: f64,
    b: f64,
    n_cells: usize,
    knots: Vec<f64>,
}

impl Tessellation {
    pub fn new(a: f64, b: f64, n_cells: usize) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidTessellation(format!(
                "endpoints must be finite, got [{a}, {b}]"
            )));
        }
        if a >= b {
            return Err(Error::InvalidTessellation(format!(
                "need a < b, got [{a}, {b}]"
            )));
        }
        if n_cells == 0 {
            return Err(Error::InvalidTessellation("n_cells must be positive".into()));
        }
        let width = (b - a) / n_cells as f64;
        let mut knots: Vec<f64> = (0..=n_cells).map(|k| a + k as f64 * width).collect();
        // pin the right endpoint exactly; a + n * width can be off by an ulp
        knots[n_cells] = b;
        Ok(Self {
            a,
            b,
            n_cells,
            knots,
        })
    }

    #[inline]
    pub fn a(&self) -> f64 {
        self.a
    }

    #[inline]
    pub fn b(&self) -> f64 {
        self.b
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    #[inline]
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    #[inline]
    pub fn cell_width(&self) -> f64 {
        (self.b - self.a) / self.n_cells as f64
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }

    /// Index of the cell holding `x`. Cells are half-open `[k_c, k_{c+1})`
    /// except the last one, which also holds `b`. Points outside `[a, b]`
    /// map to the nearest end cell.
    #[inline]
    pub fn cell_index(&self, x: f64) -> usize {
        if x <= self.a {
            return 0;
        }
        let raw = ((x - self.a) / self.cell_width()).floor();
        let c = if raw >= self.n_cells as f64 {
            self.n_cells - 1
        } else {
            raw as usize
        };
        // floor() can land one cell off when x sits within an ulp of a knot
        if c + 1 < self.n_cells && x >= self.knots[c + 1] {
            c + 1
        } else if c > 0 && x < self.knots[c] {
            c - 1
        } else {
            c
        }
    }

    /// Midpoints of all cells.
    pub fn cell_centers(&self) -> Vec<f64> {
        self.knots
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    }
}

/// Constraint matrix `L` acting on the `2n` stacked coefficients: one row per
/// interior knot (continuity), plus rows for `v(a) = 0` and `v(b) = 0` when
/// `zero_boundary` is set. The CPA space is its null space.
pub fn constraint_matrix(tess: &Tessellation, zero_boundary: bool) -> DMatrix<f64> {
    let n = tess.n_cells();
    let knots = tess.knots();
    let rows = n - 1 + if zero_boundary { 2 } else { 0 };
    let mut l = DMatrix::zeros(rows, 2 * n);
    for k in 1..n {
        let x = knots[k];
        let r = k - 1;
        l[(r, 2 * (k - 1))] = x;
        l[(r, 2 * (k - 1) + 1)] = 1.0;
        l[(r, 2 * k)] = -x;
        l[(r, 2 * k + 1)] = -1.0;
    }
    if zero_boundary {
        l[(n - 1, 0)] = tess.a();
        l[(n - 1, 1)] = 1.0;
        l[(n, 2 * (n - 1))] = tess.b();
        l[(n, 2 * (n - 1) + 1)] = 1.0;
    }
    l
}

/// Orthonormal basis of the CPA velocity space on a tessellation.
#[derive(Debug, Clone, PartialEq)]
pub struct CpaBasis {
    tess: Tessellation,
    zero_boundary: bool,
    /// `2 * n_cells` by `d`; column `j` holds the stacked coefficients of the
    /// `j`-th basis field.
    matrix: DMatrix<f64>,
    /// Row-major copy of `matrix` for per-cell gradient loops.
    rows: Vec<f64>,
}

impl CpaBasis {
    /// Builds the basis from the tent functions of the free knots, then
    /// orthonormalizes them with a Householder QR. Column signs are fixed so
    /// that the first non-negligible entry of each column is positive.
    pub fn new(tess: Tessellation, zero_boundary: bool) -> Result<Self> {
        let n = tess.n_cells();
        if zero_boundary && n < 2 {
            return Err(Error::DegenerateBasis(n));
        }
        let free_knots: Vec<usize> = if zero_boundary {
            (1..n).collect()
        } else {
            (0..=n).collect()
        };
        let d = free_knots.len();
        let knots = tess.knots();
        let width = tess.cell_width();

        let mut tents = DMatrix::zeros(2 * n, d);
        for (j, &k) in free_knots.iter().enumerate() {
            // the tent at knot k is nonzero only on cells k-1 and k
            if k > 0 {
                let c = k - 1;
                let slope = 1.0 / width;
                tents[(2 * c, j)] = slope;
                tents[(2 * c + 1, j)] = -slope * knots[c];
            }
            if k < n {
                let c = k;
                let slope = -1.0 / width;
                tents[(2 * c, j)] = slope;
                tents[(2 * c + 1, j)] = 1.0 - slope * knots[c];
            }
        }

        let mut q = tents.qr().q();
        for mut col in q.column_iter_mut() {
            if let Some(first) = col.iter().copied().find(|v| v.abs() > 1e-12) {
                if first < 0.0 {
                    col.neg_mut();
                }
            }
        }

        Ok(Self::from_parts(tess, zero_boundary, q))
    }

    fn from_parts(tess: Tessellation, zero_boundary: bool, matrix: DMatrix<f64>) -> Self {
        let rows = (0..matrix.nrows())
            .flat_map(|r| matrix.row(r).iter().copied().collect::<Vec<_>>())
            .collect();
        Self {
            tess,
            zero_boundary,
            matrix,
            rows,
        }
    }

    #[inline]
    pub fn tessellation(&self) -> &Tessellation {
        &self.tess
    }

    #[inline]
    pub fn zero_boundary(&self) -> bool {
        self.zero_boundary
    }

    /// Derivatives of cell `c`'s slope and intercept with respect to theta.
    #[inline]
    pub fn cell_rows(&self, c: usize) -> (&[f64], &[f64]) {
        let d = self.dim();
        let start = 2 * c * d;
        (
            &self.rows[start..start + d],
            &self.rows[start + d..start + 2 * d],
        )
    }

    /// Dimension of the parameter space.
    #[inline]
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    #[inline]
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Slope/intercept pair of basis column `j` on cell `c`.
    #[inline]
    pub fn column_coefficients(&self, j: usize, c: usize) -> (f64, f64) {
        (self.matrix[(2 * c, j)], self.matrix[(2 * c + 1, j)])
    }

    pub fn check_dim(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("theta"));
        }
        Ok(())
    }

    /// The velocity field `v^theta` as per-cell affine coefficients.
    pub fn field(&self, theta: &[f64]) -> Result<VelocityField> {
        self.check_dim(theta)?;
        let coeffs = &self.matrix * DVector::from_column_slice(theta);
        let n = self.tess.n_cells();
        let mut slopes = Vec::with_capacity(n);
        let mut intercepts = Vec::with_capacity(n);
        for c in 0..n {
            slopes.push(coeffs[2 * c]);
            intercepts.push(coeffs[2 * c + 1]);
        }
        Ok(VelocityField {
            tess: self.tess.clone(),
            zero_boundary: self.zero_boundary,
            slopes,
            intercepts,
        })
    }

    /// `v^theta(x)` for `x` in `[a, b]`.
    pub fn velocity_at(&self, theta: &[f64], x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite("x"));
        }
        if !self.tess.contains(x) {
            return Err(Error::OutsideDomain {
                x,
                a: self.tess.a(),
                b: self.tess.b(),
            });
        }
        Ok(self.field(theta)?.velocity(x))
    }

    /// Like [`velocity_at`](Self::velocity_at), but points outside `[a, b]`
    /// use the affine piece of the nearest end cell.
    pub fn velocity_at_extended(&self, theta: &[f64], x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite("x"));
        }
        Ok(self.field(theta)?.velocity(x))
    }

    pub fn to_json(&self) -> BasisDocument {
        let rows = (0..self.matrix.nrows())
            .map(|r| self.matrix.row(r).iter().copied().collect())
            .collect();
        BasisDocument {
            a: self.tess.a(),
            b: self.tess.b(),
            n_cells: self.tess.n_cells(),
            zero_boundary: self.zero_boundary,
            basis: rows,
        }
    }

    pub fn from_json(doc: &BasisDocument) -> Result<Self> {
        let tess = Tessellation::new(doc.a, doc.b, doc.n_cells)?;
        let nrows = 2 * doc.n_cells;
        if doc.basis.len() != nrows {
            return Err(Error::DimensionMismatch {
                expected: nrows,
                actual: doc.basis.len(),
            });
        }
        let d = doc.basis.first().map_or(0, Vec::len);
        if doc.basis.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged basis rows".into()));
        }
        let flat: Vec<f64> = doc.basis.iter().flatten().copied().collect();
        Ok(Self::from_parts(
            tess,
            doc.zero_boundary,
            DMatrix::from_row_slice(nrows, d, &flat),
        ))
    }
}

/// JSON form of a basis; `B` is stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDocument {
    pub a: f64,
    pub b: f64,
    pub n_cells: usize,
    pub zero_boundary: bool,
    #[serde(rename = "B")]
    pub basis: Vec<Vec<f64>>,
}

/// A concrete CPA velocity field: per-cell slope and intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    tess: Tessellation,
    zero_boundary: bool,
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
}

impl VelocityField {
    #[inline]
    pub fn tessellation(&self) -> &Tessellation {
        &self.tess
    }

    #[inline]
    pub fn zero_boundary(&self) -> bool {
        self.zero_boundary
    }

    #[inline]
    pub fn slope(&self, c: usize) -> f64 {
        self.slopes[c]
    }

    #[inline]
    pub fn intercept(&self, c: usize) -> f64 {
        self.intercepts[c]
    }

    #[inline]
    pub fn velocity_in_cell(&self, c: usize, x: f64) -> f64 {
        self.slopes[c] * x + self.intercepts[c]
    }

    /// Velocity at `x`, extending the end cells beyond `[a, b]`.
    #[inline]
    pub fn velocity(&self, x: f64) -> f64 {
        self.velocity_in_cell(self.tess.cell_index(x), x)
    }

    /// True when every coefficient is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.slopes.iter().chain(&self.intercepts).all(|&v| v == 0.0)
    }

    /// The negated field, whose time-1 flow inverts this one.
    pub fn negated(&self) -> Self {
        Self {
            tess: self.tess.clone(),
            zero_boundary: self.zero_boundary,
            slopes: self.slopes.iter().map(|v| -v).collect(),
            intercepts: self.intercepts.iter().map(|v| -v).collect(),
        }
    }
}
