//! Closed-form integration of CPA velocity fields.
//!
//! Inside a cell the field is affine, `v(x) = a x + b`, and the flow has the
//! exact solution
//!
//! ```text
//! psi(x, tau) = x e^{a tau} + (b / a) (e^{a tau} - 1) = x + v(x) tau phi1(a tau)
//! ```
//!
//! with `phi1(z) = (e^z - 1) / z`. A trajectory is advanced cell by cell: if
//! the knot in the direction of motion is reached before the time budget runs
//! out, the point snaps to that knot and continues in the neighbouring cell.
//!
//! Gradients with respect to `theta` come from differentiating that
//! composition. Each boundary hit time `t_k` satisfies `psi(x_k, t_k) = knot`,
//! so `dt_k/dp = -(dpsi/dp) / v(knot)`; the final segment runs for the leftover
//! time `t - sum t_k`, which feeds `-v(y) * sum dt_k/dp` back into `dy/dp`.
//! The spatial derivative is `prod_c exp(a_c tau_c)` over the visited cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tessellation::{CpaBasis, VelocityField};

/// Trace of one integration: where the trajectory went and for how long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub y: f64,
    pub cells_visited: Vec<usize>,
    pub time_in_cell: Vec<f64>,
}

/// One constant-cell piece of a trajectory.
#[derive(Debug, Clone, Copy)]
struct Segment {
    cell: usize,
    start: f64,
    duration: f64,
    /// `Some(v)` when the segment ended on a knot, with `v` the velocity there.
    exit_velocity: Option<f64>,
}

const SERIES_CUTOFF: f64 = 1e-2;

/// `(e^z - 1) / z`, continuous through `z = 0`.
#[inline]
fn phi1(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi1`]: `(z e^z - e^z + 1) / z^2`.
#[inline]
fn phi1_prime(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        // sum_{k>=1} k z^{k-1} / (k+1)!
        0.5 + z * (1.0 / 3.0
            + z * (1.0 / 8.0
                + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z * (1.0 / 840.0 + z / 5760.0)))))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// `log(1 + z) / z`, continuous through `z = 0`.
#[inline]
fn log1p_ratio(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z.ln_1p() / z
    }
}

/// Cell-local flow of `v(x) = a x + b` for time `tau`.
#[inline]
fn cell_flow(a: f64, b: f64, x: f64, tau: f64) -> f64 {
    let v = a * x + b;
    x + v * tau * phi1(a * tau)
}

/// Partial derivatives of [`cell_flow`] with respect to the slope and
/// intercept, at fixed start point and time.
#[inline]
fn cell_flow_partials(a: f64, b: f64, x: f64, tau: f64) -> (f64, f64) {
    let z = a * tau;
    let d_slope = x * tau * z.exp() + b * tau * tau * phi1_prime(z);
    let d_intercept = tau * phi1(z);
    (d_slope, d_intercept)
}

/// A prepared transformation `T^theta`: the basis plus the velocity field of
/// one parameter vector.
#[derive(Debug, Clone)]
pub struct Cpab<'a> {
    basis: &'a CpaBasis,
    field: VelocityField,
}

impl<'a> Cpab<'a> {
    pub fn new(basis: &'a CpaBasis, theta: &[f64]) -> Result<Self> {
        Ok(Self {
            basis,
            field: basis.field(theta)?,
        })
    }

    /// The inverse transformation, integrating the negated field.
    pub fn inverse(&self) -> Self {
        Self {
            basis: self.basis,
            field: self.field.negated(),
        }
    }

    pub fn basis(&self) -> &CpaBasis {
        self.basis
    }

    pub fn field(&self) -> &VelocityField {
        &self.field
    }

    fn check_point(&self, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::NonFinite("x"));
        }
        let tess = self.field.tessellation();
        if self.field.zero_boundary() && !tess.contains(x) {
            return Err(Error::OutsideDomain {
                x,
                a: tess.a(),
                b: tess.b(),
            });
        }
        Ok(())
    }

    /// Walks the trajectory from `x` for time `t`, reporting each segment.
    fn integrate(&self, x: f64, t: f64, mut visit: impl FnMut(Segment)) -> Result<f64> {
        self.check_point(x)?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::NonFinite("t"));
        }
        let field = &self.field;
        let tess = field.tessellation();
        let knots = tess.knots();
        let n = tess.n_cells();
        let bound = 10 * n;

        let mut cell = tess.cell_index(x);
        // on an interior knot moving left, start in the left cell
        if cell > 0 && x == knots[cell] && field.velocity_in_cell(cell, x) < 0.0 {
            cell -= 1;
        }
        let mut pos = x;
        let mut remaining = t;

        let pinned = field.zero_boundary() && (x == tess.a() || x == tess.b());

        for _ in 0..bound {
            let a = field.slope(cell);
            let b = field.intercept(cell);
            // zero-boundary endpoints are exact fixed points
            let v = if pinned { 0.0 } else { a * pos + b };

            let target = if v > 0.0 && cell + 1 < n {
                Some(knots[cell + 1])
            } else if v < 0.0 && cell > 0 {
                Some(knots[cell])
            } else {
                None
            };
            let hit = target.and_then(|knot| {
                let v_knot = a * knot + b;
                // a fixed point at or before the knot blocks the exit
                if v_knot * v <= 0.0 {
                    return None;
                }
                let z = a * (knot - pos) / v;
                let t_hit = (knot - pos) / v * log1p_ratio(z);
                Some((knot, v_knot, t_hit))
            });

            match hit {
                Some((knot, v_knot, t_hit)) if t_hit < remaining => {
                    visit(Segment {
                        cell,
                        start: pos,
                        duration: t_hit,
                        exit_velocity: Some(v_knot),
                    });
                    remaining -= t_hit;
                    pos = knot;
                    cell = if v > 0.0 { cell + 1 } else { cell - 1 };
                }
                _ => {
                    let mut y = if v == 0.0 {
                        pos
                    } else {
                        cell_flow(a, b, pos, remaining)
                    };
                    // the trajectory cannot pass the knot it failed to reach
                    // nor move against its velocity
                    if v > 0.0 {
                        let hi = target.unwrap_or(if field.zero_boundary() {
                            tess.b()
                        } else {
                            f64::INFINITY
                        });
                        y = y.clamp(pos, hi);
                    } else if v < 0.0 {
                        let lo = target.unwrap_or(if field.zero_boundary() {
                            tess.a()
                        } else {
                            f64::NEG_INFINITY
                        });
                        y = y.clamp(lo, pos);
                    }
                    visit(Segment {
                        cell,
                        start: pos,
                        duration: remaining,
                        exit_velocity: None,
                    });
                    if !y.is_finite() {
                        return Err(Error::NonFinite("transform output"));
                    }
                    return Ok(y);
                }
            }
        }
        Err(Error::HopLimit { bound, x })
    }

    /// `phi^theta(x; t)` with its trajectory trace.
    pub fn flow(&self, x: f64, t: f64) -> Result<FlowResult> {
        let mut cells_visited = Vec::new();
        let mut time_in_cell = Vec::new();
        let y = self.integrate(x, t, |s| {
            cells_visited.push(s.cell);
            time_in_cell.push(s.duration);
        })?;
        Ok(FlowResult {
            y,
            cells_visited,
            time_in_cell,
        })
    }

    /// `T^theta(x) = phi^theta(x; 1)`.
    pub fn apply(&self, x: f64) -> Result<f64> {
        if self.field.is_zero() {
            self.check_point(x)?;
            return Ok(x);
        }
        self.integrate(x, 1.0, |_| {})
    }

    /// `dT/dx` at `x`.
    pub fn grad_x(&self, x: f64) -> Result<f64> {
        let mut log_deriv = 0.0;
        let field = &self.field;
        self.integrate(x, 1.0, |s| log_deriv += field.slope(s.cell) * s.duration)?;
        Ok(log_deriv.exp())
    }

    /// `T(x)`, `dT/dx`, and `dT/dtheta` (written into `dtheta`) in one pass.
    pub fn eval_with_grads(&self, x: f64, dtheta: &mut [f64]) -> Result<(f64, f64)> {
        let mut scratch = Vec::new();
        self.eval_inner(x, dtheta, None, &mut scratch)
    }

    /// Like [`eval_with_grads`](Self::eval_with_grads), additionally writing
    /// the gradient of `dT/dx` with respect to theta into `dslope`.
    pub fn eval_with_second(
        &self,
        x: f64,
        dtheta: &mut [f64],
        dslope: &mut [f64],
    ) -> Result<(f64, f64)> {
        let mut scratch = Vec::new();
        self.eval_inner(x, dtheta, Some(dslope), &mut scratch)
    }

    fn eval_inner(
        &self,
        x: f64,
        dtheta: &mut [f64],
        mut dslope: Option<&mut [f64]>,
        hit_time_grad: &mut Vec<f64>,
    ) -> Result<(f64, f64)> {
        let d = self.basis.dim();
        if dtheta.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: dtheta.len(),
            });
        }
        if let Some(ds) = dslope.as_deref() {
            if ds.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: ds.len(),
                });
            }
        }
        // running sum of the hit-time gradients
        dtheta.fill(0.0);
        if let Some(ds) = dslope.as_deref_mut() {
            ds.fill(0.0);
        }
        hit_time_grad.clear();
        hit_time_grad.resize(d, 0.0);

        let field = &self.field;
        let basis = self.basis;
        let mut log_deriv = 0.0;
        let mut last: Option<Segment> = None;

        let y = self.integrate(x, 1.0, |s| {
            let a = field.slope(s.cell);
            let b = field.intercept(s.cell);
            log_deriv += a * s.duration;
            match s.exit_velocity {
                Some(v_knot) => {
                    let (pa, pb) = cell_flow_partials(a, b, s.start, s.duration);
                    let (rows_a, rows_b) = basis.cell_rows(s.cell);
                    for j in 0..d {
                        let dt = -(pa * rows_a[j] + pb * rows_b[j]) / v_knot;
                        dtheta[j] += dt;
                        if let Some(ds) = dslope.as_deref_mut() {
                            ds[j] += rows_a[j] * s.duration + a * dt;
                        }
                    }
                }
                None => last = Some(s),
            }
        })?;

        let s = last.expect("integration always ends with a final segment");
        let a = field.slope(s.cell);
        let b = field.intercept(s.cell);
        let tess = field.tessellation();
        let pinned = field.zero_boundary() && (x == tess.a() || x == tess.b());
        let (pa, pb) = if pinned {
            (0.0, 0.0)
        } else {
            cell_flow_partials(a, b, s.start, s.duration)
        };
        let v_end = a * y + b;
        let (rows_a, rows_b) = basis.cell_rows(s.cell);
        let dydx = log_deriv.exp();
        for j in 0..d {
            let hit_sum = dtheta[j];
            dtheta[j] = pa * rows_a[j] + pb * rows_b[j] - v_end * hit_sum;
            if let Some(ds) = dslope.as_deref_mut() {
                let log_grad = ds[j] + rows_a[j] * s.duration - a * hit_sum;
                ds[j] = dydx * log_grad;
            }
        }
        Ok((y, dydx))
    }
}

/// Integrates `v^theta` from `x` for time `t`.
pub fn transform(basis: &CpaBasis, theta: &[f64], x: f64, t: f64) -> Result<FlowResult> {
    Cpab::new(basis, theta)?.flow(x, t)
}

/// Gradient of `T^theta(x)` with respect to `theta`.
pub fn transform_grad_theta(basis: &CpaBasis, theta: &[f64], x: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; basis.dim()];
    Cpab::new(basis, theta)?.eval_with_grads(x, &mut out)?;
    Ok(out)
}

/// `dT^theta/dx`; always positive.
pub fn transform_grad_x(basis: &CpaBasis, theta: &[f64], x: f64) -> Result<f64> {
    Cpab::new(basis, theta)?.grad_x(x)
}

/// `(T^theta)^{-1}(y)`, computed as `T^{-theta}(y)`.
pub fn inverse_transform(basis: &CpaBasis, theta: &[f64], y: f64) -> Result<f64> {
    Cpab::new(basis, theta)?.inverse().apply(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tessellation::Tessellation;
    use approx::assert_relative_eq;

    fn basis(a: f64, b: f64, n: usize, zb: bool) -> CpaBasis {
        CpaBasis::new(Tessellation::new(a, b, n).unwrap(), zb).unwrap()
    }

    #[test]
    fn phi_helpers_match_long_series() {
        // sum_{k>=1} k z^{k-1} / (k+1)!, summed far past double precision
        let series = |z: f64| {
            let mut fact = 2.0;
            let mut total = 0.0;
            for k in 1..40 {
                total += k as f64 * z.powi(k as i32 - 1) / fact;
                fact *= (k + 2) as f64;
            }
            total
        };
        for &z in &[-0.4, -0.0100001, -0.0099999, -1e-9, 0.0, 1e-9, 0.0099999, 0.0100001, 0.3] {
            assert_relative_eq!(phi1_prime(z), series(z), max_relative = 1e-12);
        }
        assert_eq!(phi1(0.0), 1.0);
        assert_relative_eq!(phi1(1e-12), 1.0, max_relative = 1e-11);
        assert_relative_eq!(log1p_ratio(1e-12), 1.0, max_relative = 1e-11);
    }

    #[test]
    fn zero_theta_is_identity() {
        let bs = basis(-3.0, 3.0, 10, true);
        let theta = vec![0.0; bs.dim()];
        let cp = Cpab::new(&bs, &theta).unwrap();
        for i in 0..=100 {
            let x = -3.0 + 0.06 * i as f64;
            let x = x.min(3.0);
            assert_eq!(cp.apply(x).unwrap(), x);
            assert_eq!(cp.flow(x, 0.3).unwrap().y, x);
            assert_eq!(cp.grad_x(x).unwrap(), 1.0);
        }
    }

    #[test]
    fn endpoints_are_fixed_under_zero_boundary() {
        let bs = basis(-3.0, 3.0, 10, true);
        let theta: Vec<f64> = (0..9).map(|j| (j as f64 - 4.0) * 0.7).collect();
        assert_eq!(transform(&bs, &theta, -3.0, 1.0).unwrap().y, -3.0);
        assert_eq!(transform(&bs, &theta, 3.0, 1.0).unwrap().y, 3.0);
        let g = transform_grad_theta(&bs, &theta, -3.0).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(inverse_transform(&bs, &theta, 3.0).unwrap(), 3.0);
    }

    #[test]
    fn trace_times_sum_to_t() {
        let bs = basis(0.0, 1.0, 8, true);
        let theta = [1.5, -2.0, 0.7, 3.0, -1.0, 0.4, 2.2];
        for &t in &[0.0, 0.25, 1.0, 3.0] {
            let r = transform(&bs, &theta, 0.3, t).unwrap();
            let total: f64 = r.time_in_cell.iter().sum();
            assert_relative_eq!(total, t, epsilon = 1e-12);
            for w in r.cells_visited.windows(2) {
                assert_eq!((w[0] as i64 - w[1] as i64).abs(), 1);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let bs = basis(0.0, 1.0, 4, true);
        let theta = [0.1, 0.2, 0.3];
        assert!(matches!(
            transform(&bs, &theta, 1.5, 1.0),
            Err(Error::OutsideDomain { .. })
        ));
        assert!(matches!(
            transform(&bs, &theta, f64::NAN, 1.0),
            Err(Error::NonFinite(_))
        ));
        assert!(transform(&bs, &[0.1], 0.5, 1.0).is_err());
        assert!(transform(&bs, &theta, 0.5, -1.0).is_err());
    }

    #[test]
    fn free_boundary_extends_outside_domain() {
        let bs = basis(-1.0, 1.0, 4, false);
        let theta = [0.3, -0.2, 0.5, 0.1, -0.4];
        let y = transform(&bs, &theta, 2.5, 1.0).unwrap().y;
        assert!(y.is_finite());
        let back = inverse_transform(&bs, &theta, y).unwrap();
        assert_relative_eq!(back, 2.5, epsilon = 1e-10);
    }

    #[test]
    fn constant_field_moves_at_unit_speed() {
        // free basis on one cell: fields are v(x) = a x + b; pick theta giving
        // a pure translation and compare against x + b t
        let bs = basis(0.0, 1.0, 1, false);
        let m = bs.matrix();
        // solve for theta with slope 0 and intercept 0.25
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let theta = [
            (0.0 * m[(1, 1)] - 0.25 * m[(0, 1)]) / det,
            (0.25 * m[(0, 0)] - 0.0 * m[(1, 0)]) / det,
        ];
        let y = transform(&bs, &theta, 0.1, 1.0).unwrap().y;
        assert_relative_eq!(y, 0.35, epsilon = 1e-12);
    }
}
